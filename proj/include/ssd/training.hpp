#pragma once

// Adversarial training: BCE criterion, Adam, strict one-to-one alternation
// of discriminator and generator updates, per-epoch validation and best
// checkpoint selection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ssd/artifacts.hpp"
#include "ssd/data.hpp"
#include "ssd/errors.hpp"
#include "ssd/layers.hpp"
#include "ssd/networks.hpp"
#include "ssd/random.hpp"
#include "ssd/tensor.hpp"
#include "ssd/training_types.hpp"

namespace ssd {

inline constexpr double kBceEps = 1e-7;

namespace detail {
inline void check_targets(std::span<const double> targets) {
  for (double y : targets)
    if (y != 0.0 && y != 1.0) throw ArgumentError("bce_loss: targets must be 0 or 1");
}
}  // namespace detail

/// -mean(y log p + (1 - y) log(1 - p)) with p clamped to [eps, 1 - eps].
template <typename T>
double bce_loss(std::span<const T> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size() || predictions.empty())
    throw DimensionError("bce_loss: predictions and targets must be non-empty and equal length");
  detail::check_targets(targets);
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = std::clamp(double(predictions[i]), kBceEps, 1.0 - kBceEps);
    acc += targets[i] == 1.0 ? std::log(p) : std::log1p(-p);
  }
  return -acc / double(predictions.size());
}

template <typename T>
double bce_loss(std::span<const T> predictions, double target) {
  std::vector<double> t(predictions.size(), target);
  return bce_loss(predictions, std::span<const double>(t));
}

/// d bce / d p for a constant target; zero where the clamp is active.
template <typename T>
Tensor<T> bce_grad(const Tensor<T>& predictions, double target) {
  Tensor<T> g(predictions.shape());
  const double n = double(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = predictions[i];
    if (p < kBceEps || p > 1.0 - kBceEps) continue;
    g[i] = static_cast<T>(target == 1.0 ? -1.0 / (p * n) : 1.0 / ((1.0 - p) * n));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(const std::vector<ParamRef<T>>& params) {
    for (const auto& p : params) {
      m.emplace_back(p.param->value.shape());
      v.emplace_back(p.param->value.shape());
    }
  }
};

/// Bias-corrected Adam update applied in place. A non-finite gradient aborts
/// before any parameter changes.
template <typename T>
void adam_step(const std::vector<ParamRef<T>>& params, AdamState<T>& state, const AdamHyper& h) {
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].shape() != params[i].param->value.shape())
      throw DimensionError("adam_step: moment shape mismatch for " + params[i].name);
    if (!params[i].param->grad.all_finite())
      throw NumericError("non-finite gradient in " + params[i].name);
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(h.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].param;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      const double mk = h.beta1 * double(m[k]) + (1.0 - h.beta1) * g;
      const double vk = h.beta2 * double(v[k]) + (1.0 - h.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = h.lr * (mk / bc1) / (std::sqrt(vk / bc2) + h.eps);
      p.value[k] = static_cast<T>(double(p.value[k]) - update);
    }
  }
}

// ---------------------------------------------------------------------------

inline GeneratorConfig generator_config(const TrainConfig& c) {
  return {c.generator_channels, c.generator_mode};
}

inline DiscriminatorConfig discriminator_config(const TrainConfig& c) {
  return {c.discriminator_channels, c.spectral_norm};
}

inline AdamHyper adam_hyper(const TrainConfig& c) { return {c.lr, c.beta1, c.beta2, c.adam_eps}; }

// Independent streams derived from the run seed.
inline constexpr std::uint64_t kInitStream = 0x9e3779b97f4a7c15ULL;
inline constexpr std::uint64_t kValNoiseStream = 0xc2b2ae3d27d4eb4fULL;
inline constexpr std::uint64_t kPanelStream = 0x165667b19e3779f9ULL;

template <typename T>
Tensor<T> sample_latents(std::size_t n, std::size_t dim, Rng& rng) {
  Tensor<T> z(Shape{n, dim});
  fill_standard_normal(z.span(), rng);
  return z;
}

/// Writes produced during training; any of them may be disabled.
struct RunOutputs {
  std::filesystem::path dir;  // empty: nothing is written
  bool sample_grids = true;
  std::size_t panel_size = 16;
};

/// Owns both networks, both optimizers and the noise RNG. Every mutation of
/// that state happens inside step(), so a checkpoint taken between steps
/// captures a consistent point that resumes bit-identically.
template <typename T = float>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const ImageSet& data)
      : cfg_(std::move(cfg)),
        data_(&data),
        generator_(generator_config(cfg_)),
        discriminator_(discriminator_config(cfg_)) {
    cfg_.validate();
    if (data.count == 0) throw ConfigError("training set is empty");
    if (data.size != generator_.image_size() || data.size != discriminator_.image_size())
      throw ConfigError("training images are " + std::to_string(data.size) +
                        " px, networks expect " + std::to_string(generator_.image_size()));
    if (data.count < cfg_.batch_size)
      throw ConfigError("training set has " + std::to_string(data.count) +
                        " images, fewer than one batch of " + std::to_string(cfg_.batch_size));
    init_weights(generator_, cfg_.seed ^ kInitStream);
    init_weights(discriminator_, (cfg_.seed ^ kInitStream) + 1);
    opt_g_ = AdamState<T>(generator_.parameters());
    opt_d_ = AdamState<T>(discriminator_.parameters());
    rng_.seed(cfg_.seed);
    Rng vrng(cfg_.seed ^ kValNoiseStream);
    val_noise_ = sample_latents<T>(cfg_.val_noise_count, generator_.latent_dim(), vrng);
  }

  const TrainConfig& config() const { return cfg_; }
  Generator<T>& generator() { return generator_; }
  Discriminator<T>& discriminator() { return discriminator_; }
  const TrainLog& log() const { return log_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t global_step() const { return step_; }
  bool finished() const { return epoch_ >= cfg_.epochs; }
  std::size_t batches_per_epoch() const { return data_->count / cfg_.batch_size; }
  std::size_t total_steps() const { return cfg_.epochs * batches_per_epoch(); }
  std::uint64_t d_steps() const { return opt_d_.t; }
  std::uint64_t g_steps() const { return opt_g_.t; }
  double best_val_loss() const { return best_val_; }
  const std::optional<Checkpoint>& best_checkpoint() const { return best_; }

  /// Zeroes every discriminator parameter. The discriminator then outputs
  /// exactly 0.5 and receives zero gradients, so it stays fixed.
  void zero_discriminator() {
    for (auto& p : discriminator_.parameters()) p.param->value.zero();
  }

  struct DStepStats {
    double loss;
    double real_prob;
    double fake_prob;
  };

  /// One discriminator update on bce(D(real), 1) + bce(D(G(z)), 0) with fresh
  /// z. The fake batch is produced without touching generator state. The
  /// real pass advances the spectral-norm buffers once; the fake pass reuses
  /// them.
  DStepStats train_discriminator_step(const Tensor<T>& real) {
    if (real.dim(0) != cfg_.batch_size)
      throw ArgumentError("discriminator step: batch has " + std::to_string(real.dim(0)) +
                          " images, expected " + std::to_string(cfg_.batch_size));
    const Tensor<T> z = sample_latents<T>(cfg_.batch_size, generator_.latent_dim(), rng_);
    const Tensor<T> fake = generator_.forward(z, passes::frozen);

    discriminator_.zero_grad();
    const Tensor<T> p_real = discriminator_.forward(real, passes::train);
    const double loss_real = bce_loss<T>(p_real.span(), 1.0);
    discriminator_.backward(bce_grad(p_real, 1.0));
    const Tensor<T> p_fake = discriminator_.forward(fake, passes::train_no_advance);
    const double loss_fake = bce_loss<T>(p_fake.span(), 0.0);
    discriminator_.backward(bce_grad(p_fake, 0.0));

    const double loss = loss_real + loss_fake;
    if (!std::isfinite(loss)) throw NumericError("non-finite discriminator loss at step " + std::to_string(step_ + 1));
    adam_step(discriminator_.parameters(), opt_d_, adam_hyper(cfg_));
    return {loss, mean(p_real), mean(p_fake)};
  }

  struct GStepStats {
    double loss;
    double grad_norm;
  };

  /// One generator update on the non-saturating loss bce(D(G(z)), 1). The
  /// discriminator runs on batch statistics with every buffer frozen and
  /// accumulates no parameter gradients.
  GStepStats train_generator_step() {
    const Tensor<T> z = sample_latents<T>(cfg_.batch_size, generator_.latent_dim(), rng_);
    generator_.zero_grad();
    const Tensor<T> fake = generator_.forward(z, passes::train);
    const Tensor<T> p = discriminator_.forward(fake, passes::frozen);
    const double loss = bce_loss<T>(p.span(), 1.0);
    if (!std::isfinite(loss)) throw NumericError("non-finite generator loss at step " + std::to_string(step_ + 1));
    generator_.backward(discriminator_.backward(bce_grad(p, 1.0), false));
    double sq = 0.0;
    for (const auto& pr : generator_.parameters())
      for (T g : pr.param->grad.values()) sq += double(g) * double(g);
    adam_step(generator_.parameters(), opt_g_, adam_hyper(cfg_));
    return {loss, std::sqrt(sq)};
  }

  /// bce(D(G(val_noise)), 1) with both networks in eval mode; mutates nothing.
  double validation_generator_loss(std::size_t chunk = 50) {
    double acc = 0.0;
    const std::size_t n = val_noise_.dim(0), d = val_noise_.dim(1);
    for (std::size_t b = 0; b < n; b += chunk) {
      const std::size_t m = std::min(chunk, n - b);
      Tensor<T> z(Shape{m, d},
                  std::vector<T>(val_noise_.data() + b * d, val_noise_.data() + (b + m) * d));
      const Tensor<T> p = discriminator_.forward(generator_.forward(z, passes::eval), passes::eval);
      acc += bce_loss<T>(p.span(), 1.0) * double(m);
    }
    return acc / double(n);
  }

  /// Runs the next alternation step (D then G) and, after the last batch of
  /// an epoch, the epoch-end validation.
  StepRecord step() {
    if (finished()) throw ArgumentError("training already finished");
    if (batch_ == 0 || batches_.empty()) batches_ = make_batches(data_->count, cfg_.batch_size, cfg_.seed, epoch_);
    const Tensor<T> real = data_->batch<T>(batches_[batch_]);
    const auto d = train_discriminator_step(real);
    const auto g = train_generator_step();
    ++step_;
    StepRecord rec{step_, epoch_, d.loss, g.loss, d.real_prob, d.fake_prob, g.grad_norm};
    log_.steps.push_back(rec);
    if (++batch_ == batches_.size()) end_epoch();
    return rec;
  }

  /// Trains until `max_steps` more steps have run or all epochs are done.
  void run(std::size_t max_steps = std::numeric_limits<std::size_t>::max()) {
    for (std::size_t i = 0; i < max_steps && !finished(); ++i) {
      try {
        step();
      } catch (const NumericError&) {
        flush_log();
        throw;
      }
    }
  }

  void set_outputs(RunOutputs out) {
    outputs_ = std::move(out);
    if (!outputs_.dir.empty()) {
      std::filesystem::create_directories(outputs_.dir);
      Rng prng(cfg_.seed ^ kPanelStream);
      panel_ = sample_latents<T>(outputs_.panel_size, generator_.latent_dim(), prng);
    }
  }

  Tensor<T> generate(const Tensor<T>& z) { return generator_.forward(z, passes::eval); }

  // -- checkpoints ---------------------------------------------------------

  Checkpoint snapshot() {
    Checkpoint c;
    c.set("format", "ssd-train-state");
    for (const auto& [k, v] : config_fields(cfg_)) c.set("config." + k, v);
    c.set("epoch", std::to_string(epoch_));
    c.set("batch_in_epoch", std::to_string(batch_));
    c.set("step", std::to_string(step_));
    c.set("validation_loss", detail::format_double(last_val_));
    c.set("best_validation_loss", detail::format_double(best_val_));
    c.set("adam_g_t", std::to_string(opt_g_.t));
    c.set("adam_d_t", std::to_string(opt_d_.t));
    c.set("rng", rng_state(rng_));
    add_network(c, "g", generator_, opt_g_);
    add_network(c, "d", discriminator_, opt_d_);
    c.add("val_noise", val_noise_);
    return c;
  }

  /// Rebuilds a trainer at exactly the state captured by `snapshot`.
  static Trainer restore(const Checkpoint& c, const ImageSet& data) {
    Trainer t(config_from_checkpoint(c), data);
    t.epoch_ = detail::parse_count("epoch", c.get("epoch"));
    t.batch_ = detail::parse_count("batch_in_epoch", c.get("batch_in_epoch"));
    t.step_ = detail::parse_count("step", c.get("step"));
    t.last_val_ = detail::parse_double("validation_loss", c.get("validation_loss"));
    t.best_val_ = detail::parse_double("best_validation_loss", c.get("best_validation_loss"));
    t.opt_g_.t = detail::parse_count("adam_g_t", c.get("adam_g_t"));
    t.opt_d_.t = detail::parse_count("adam_d_t", c.get("adam_d_t"));
    set_rng_state(t.rng_, c.get("rng"));
    read_network(c, "g", t.generator_, t.opt_g_);
    read_network(c, "d", t.discriminator_, t.opt_d_);
    c.read_into("val_noise", t.val_noise_);
    if (t.batch_ != 0) t.batches_ = make_batches(data.count, t.cfg_.batch_size, t.cfg_.seed, t.epoch_);
    return t;
  }

 private:
  static double mean(const Tensor<T>& t) {
    double s = 0.0;
    for (T v : t.values()) s += v;
    return s / double(t.size());
  }

  template <typename Net>
  static void add_network(Checkpoint& c, const std::string& tag, Net& net, const AdamState<T>& opt) {
    const auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.add(tag + ".param." + params[i].name, params[i].param->value);
      c.add(tag + ".adam_m." + params[i].name, opt.m[i]);
      c.add(tag + ".adam_v." + params[i].name, opt.v[i]);
    }
    for (const auto& b : net.buffers()) c.add(tag + ".buffer." + b.name, *b.buffer);
  }

  template <typename Net>
  static void read_network(const Checkpoint& c, const std::string& tag, Net& net, AdamState<T>& opt) {
    const auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.read_into(tag + ".param." + params[i].name, params[i].param->value);
      c.read_into(tag + ".adam_m." + params[i].name, opt.m[i]);
      c.read_into(tag + ".adam_v." + params[i].name, opt.v[i]);
    }
    for (const auto& b : net.buffers()) c.read_into(tag + ".buffer." + b.name, *b.buffer);
  }

  void end_epoch() {
    last_val_ = validation_generator_loss();
    const bool improved = last_val_ < best_val_;
    log_.epochs.push_back({epoch_, last_val_, improved});
    ++epoch_;
    batch_ = 0;
    batches_.clear();
    if (improved) {
      best_val_ = last_val_;
      best_ = snapshot();
      if (!outputs_.dir.empty()) save_checkpoint(*best_, outputs_.dir / "best.ckpt");
    }
    if (!outputs_.dir.empty()) {
      flush_log();
      if (outputs_.sample_grids && !panel_.empty()) {
        const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(double(panel_.dim(0)))));
        char name[64];
        std::snprintf(name, sizeof name, "samples_epoch_%03zu.png", epoch_);
        write_sample_grid(generate(panel_), cols, outputs_.dir / name);
      }
      if (finished()) save_checkpoint(snapshot(), outputs_.dir / "final.ckpt");
    }
  }

  void flush_log() {
    if (!outputs_.dir.empty()) write_loss_csv(log_, outputs_.dir / "losses.csv");
  }

 public:
  static TrainConfig config_from_checkpoint(const Checkpoint& c) {
    TrainConfig cfg;
    for (const auto& [k, v] : c.meta)
      if (k.rfind("config.", 0) == 0) apply_config_field(cfg, k.substr(7), v);
    return cfg;
  }

 private:
  TrainConfig cfg_;
  const ImageSet* data_;
  Generator<T> generator_;
  Discriminator<T> discriminator_;
  AdamState<T> opt_g_, opt_d_;
  Rng rng_;
  Tensor<T> val_noise_;
  TrainLog log_;
  std::size_t epoch_ = 0, batch_ = 0, step_ = 0;
  std::vector<std::vector<std::size_t>> batches_;
  double last_val_ = std::numeric_limits<double>::infinity();
  double best_val_ = std::numeric_limits<double>::infinity();
  std::optional<Checkpoint> best_;
  RunOutputs outputs_;
  Tensor<T> panel_;
};

/// Applies the K% subset, prepares the training images at the model
/// resolution, and returns them.
inline ImageSet prepare_training_set(const DatasetSplit& split, const TrainConfig& cfg) {
  const DatasetSplit sub = subset_fraction(split, cfg.data_fraction, cfg.seed);
  if (sub.train.empty()) throw ConfigError("training split is empty after subsetting");
  return prepare_images(sub.train, image_size_for(cfg.generator_channels.size() - 1));
}

struct TrainingResult {
  Checkpoint best;
  TrainLog log;
};

/// Full run: every epoch shuffles, alternates D and G per batch, validates at
/// the epoch end and keeps the checkpoint with the strictly lowest
/// validation loss.
template <typename T = float>
TrainingResult run_training(const TrainConfig& cfg, const ImageSet& data, RunOutputs outputs = {}) {
  Trainer<T> trainer(cfg, data);
  trainer.set_outputs(std::move(outputs));
  trainer.run();
  if (!trainer.best_checkpoint()) throw NumericError("no finite validation loss was recorded");
  return {*trainer.best_checkpoint(), trainer.log()};
}

/// Generator rebuilt from a training checkpoint.
template <typename T = float>
Generator<T> load_generator(const Checkpoint& c) {
  const TrainConfig cfg = Trainer<T>::config_from_checkpoint(c);
  Generator<T> g(generator_config(cfg));
  for (const auto& p : g.parameters()) c.read_into("g.param." + p.name, p.param->value);
  for (const auto& b : g.buffers()) c.read_into("g.buffer." + b.name, *b.buffer);
  return g;
}


/// Latents drawn from a generator seeded with `seed` alone.
template <typename T = float>
Tensor<T> latents_for_seed(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return sample_latents<T>(n, dim, rng);
}

/// Eval-mode generation one latent at a time, so a frame depends only on its
/// own latent and never on what else shares the batch.
template <typename T = float>
Tensor<T> generate_from_latents(Generator<T>& g, const Tensor<T>& z) {
  require_rank(z, 2, "generate_from_latents");
  const std::size_t n = z.dim(0), d = z.dim(1), s = g.image_size();
  const std::size_t per = 3 * s * s;
  Tensor<T> out(Shape{n, 3, s, s});
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> zi(Shape{1, d}, std::vector<T>(z.data() + i * d, z.data() + (i + 1) * d));
    const Tensor<T> img = g.forward(zi, passes::eval);
    std::copy(img.data(), img.data() + per, out.data() + i * per);
  }
  return out;
}

}  // namespace ssd
