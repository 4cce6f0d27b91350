#pragma once

// Mapping network, style-modulated generator and spectrally normalized
// discriminator.
//
// Generator (canonical plan 100 -> 512 -> 256 -> 128 -> 64 -> 3, kernel 4):
//   block 1 stride 1 pad 0 (1x1 -> 4x4), blocks 2..5 stride 2 pad 1.
//   Blocks 1..4: deconv -> AdaIN(w) -> ReLU; block 5: deconv -> tanh.
// Discriminator (3 -> 64 -> 128 -> 256 -> 512 -> 1):
//   layers 1..4 stride 2 pad 1, layer 5 stride 1 pad 0 (4x4 -> 1x1).
//   Spectral norm on every kernel, batch norm on layers 2..4,
//   leaky_relu(0.01) after layers 1..4, sigmoid at the output.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ssd/errors.hpp"
#include "ssd/layers.hpp"
#include "ssd/random.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

enum class GeneratorMode { adain, mapping_only, none };

inline std::string to_string(GeneratorMode m) {
  switch (m) {
    case GeneratorMode::adain: return "adain";
    case GeneratorMode::mapping_only: return "mapping_only";
    case GeneratorMode::none: return "none";
  }
  return "?";
}

inline GeneratorMode parse_generator_mode(const std::string& s) {
  if (s == "adain") return GeneratorMode::adain;
  if (s == "mapping_only") return GeneratorMode::mapping_only;
  if (s == "none") return GeneratorMode::none;
  throw ConfigError("unknown generator mode '" + s + "' (expected adain|mapping_only|none)");
}

using ChannelPlan = std::vector<std::size_t>;

inline const ChannelPlan kGeneratorChannels{100, 512, 256, 128, 64, 3};
inline const ChannelPlan kDiscriminatorChannels{3, 64, 128, 256, 512, 1};
inline constexpr std::size_t kLatentDim = 100;
inline constexpr std::size_t kMappingLayers = 4;
inline constexpr double kMappingSlope = 0.2;
inline constexpr double kDiscriminatorSlope = 0.01;
inline constexpr double kInitStd = 0.02;

/// Spatial size produced by a generator (or consumed by a discriminator)
/// with `layers` conv blocks: 4 after the first block, doubled by each
/// stride-2 block.
inline std::size_t image_size_for(std::size_t layers) {
  if (layers < 2) throw ConfigError("channel plan needs at least two layers");
  return std::size_t{4} << (layers - 1);
}

namespace detail {

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
  std::vector<double> z(t.size());
  fill_standard_normal(std::span<double>(z), rng);
  for (std::size_t i = 0; i < z.size(); ++i) t[i] = static_cast<T>(mean + stddev * z[i]);
}

template <typename T>
void init_unit_vector(Tensor<T>& u, Rng& rng) {
  std::vector<double> z(u.size());
  fill_standard_normal(std::span<double>(z), rng);
  double norm = 0.0;
  for (double v : z) norm += v * v;
  norm = std::sqrt(norm);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = static_cast<T>(z[i] / norm);
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Four 100 -> 100 linear layers, each followed by leaky_relu(0.2).
template <typename T>
class MappingNetwork {
 public:
  MappingNetwork() : MappingNetwork(kLatentDim) {}
  explicit MappingNetwork(std::size_t dim, std::size_t layers = kMappingLayers) : dim_(dim) {
    for (std::size_t i = 0; i < layers; ++i) {
      linears_.emplace_back(dim, dim);
      acts_.emplace_back(Activation<T>::leaky_relu(T(kMappingSlope)));
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t depth() const { return linears_.size(); }
  Linear<T>& layer(std::size_t i) { return linears_.at(i); }

  /// z [N, dim] -> w [N, dim]
  Tensor<T> forward(const Tensor<T>& z) {
    require_rank(z, 2, "mapping input");
    if (z.dim(1) != dim_)
      throw DimensionError("mapping network: expected latent width " + std::to_string(dim_) +
                           ", got " + std::to_string(z.dim(1)));
    Tensor<T> h = z;
    for (std::size_t i = 0; i < linears_.size(); ++i) h = acts_[i].forward(linears_[i].forward(h));
    return h;
  }

  Tensor<T> backward(const Tensor<T>& grad_w, bool param_grads = true) {
    Tensor<T> g = grad_w;
    for (std::size_t i = linears_.size(); i-- > 0;)
      g = linears_[i].backward(acts_[i].backward(g), param_grads);
    return g;
  }

  void init(Rng& rng) {
    for (auto& l : linears_) {
      detail::fill_normal(l.weight.value, rng, 0.0, kInitStd);
      l.bias.value.zero();
    }
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    for (std::size_t i = 0; i < linears_.size(); ++i)
      linears_[i].collect(prefix + "." + std::to_string(i), out);
  }

 private:
  std::size_t dim_;
  std::vector<Linear<T>> linears_;
  std::vector<ActivationLayer<T>> acts_;
};

// ---------------------------------------------------------------------------

struct GeneratorConfig {
  ChannelPlan channels = kGeneratorChannels;
  GeneratorMode mode = GeneratorMode::adain;
};

/// In adain mode the deconvolution stack consumes z and every block except
/// the last is modulated by w = mapping(z). In mapping_only mode w feeds the
/// stack directly and batch norm takes AdaIN's place. Mode none drops the
/// mapping network (plain DCGAN generator with batch norm).
template <typename T>
class Generator {
 public:
  Generator() : Generator(GeneratorConfig{}) {}
  explicit Generator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
    const auto& ch = cfg_.channels;
    if (ch.size() < 3) throw ConfigError("generator channel plan needs at least 3 entries");
    const std::size_t blocks = ch.size() - 1;
    image_size_ = image_size_for(blocks);
    if (cfg_.mode != GeneratorMode::none) mapping_ = MappingNetwork<T>(latent_dim());
    for (std::size_t i = 0; i < blocks; ++i) {
      const ConvGeometry g = i == 0 ? ConvGeometry{4, 1, 0} : ConvGeometry{4, 2, 1};
      deconvs_.emplace_back(ch[i], ch[i + 1], g);
      if (i + 1 < blocks) {
        if (cfg_.mode == GeneratorMode::adain)
          adains_.emplace_back(latent_dim(), ch[i + 1]);
        else
          norms_.emplace_back(ch[i + 1]);
        acts_.emplace_back(Activation<T>::relu());
      } else {
        acts_.emplace_back(Activation<T>::tanh());
      }
    }
  }

  const GeneratorConfig& config() const { return cfg_; }
  GeneratorMode mode() const { return cfg_.mode; }
  std::size_t latent_dim() const { return cfg_.channels.front(); }
  std::size_t image_size() const { return image_size_; }
  std::size_t blocks() const { return deconvs_.size(); }
  MappingNetwork<T>& mapping() { return mapping_; }
  ConvTranspose2d<T>& deconv(std::size_t i) { return deconvs_.at(i); }
  AdaIN<T>& adain(std::size_t i) { return adains_.at(i); }
  BatchNorm2d<T>& norm(std::size_t i) { return norms_.at(i); }

  /// Spatial size after each block of the most recent forward pass.
  const std::vector<std::size_t>& spatial_trace() const { return trace_; }

  /// z [N, latent] -> images [N, 3, S, S] in [-1, 1].
  Tensor<T> forward(const Tensor<T>& z, const Pass& pass = passes::train) {
    require_rank(z, 2, "generator input");
    if (z.dim(1) != latent_dim())
      throw DimensionError("generator: expected latent width " + std::to_string(latent_dim()) +
                           ", got " + std::to_string(z.dim(1)));
    const std::size_t n = z.dim(0);
    trace_.clear();
    Tensor<T> h;
    if (cfg_.mode == GeneratorMode::none) {
      h = z;
    } else {
      style_ = mapping_.forward(z);
      h = cfg_.mode == GeneratorMode::adain ? z : style_;
    }
    h.reshape(Shape{n, latent_dim(), 1, 1});
    for (std::size_t i = 0; i < deconvs_.size(); ++i) {
      h = deconvs_[i].forward(h);
      if (i + 1 < deconvs_.size()) {
        if (cfg_.mode == GeneratorMode::adain)
          h = adains_[i].forward(h, style_);
        else
          h = norms_[i].forward(h, pass);
      }
      h = acts_[i].forward(h);
      trace_.push_back(h.dim(2));
    }
    return h;
  }

  /// Accumulates parameter gradients and returns d loss / d z.
  Tensor<T> backward(const Tensor<T>& grad_out, bool param_grads = true) {
    const std::size_t n = grad_out.dim(0);
    Tensor<T> grad_style;
    if (cfg_.mode == GeneratorMode::adain) grad_style = Tensor<T>(Shape{n, latent_dim()});
    Tensor<T> g = grad_out;
    for (std::size_t i = deconvs_.size(); i-- > 0;) {
      g = acts_[i].backward(g);
      if (i + 1 < deconvs_.size()) {
        if (cfg_.mode == GeneratorMode::adain) {
          auto gr = adains_[i].backward(g, param_grads);
          g = std::move(gr.x);
          add_into(grad_style, gr.w);
        } else {
          g = norms_[i].backward(g, param_grads);
        }
      }
      g = deconvs_[i].backward(g, param_grads);
    }
    g.reshape(Shape{n, latent_dim()});
    switch (cfg_.mode) {
      case GeneratorMode::none: return g;
      case GeneratorMode::mapping_only: return mapping_.backward(g, param_grads);
      case GeneratorMode::adain: {
        Tensor<T> gz = mapping_.backward(grad_style, param_grads);
        add_into(gz, g);
        return gz;
      }
    }
    return g;
  }

  void init(Rng& rng) {
    if (cfg_.mode != GeneratorMode::none) mapping_.init(rng);
    for (auto& d : deconvs_) detail::fill_normal(d.weight.value, rng, 0.0, kInitStd);
    for (auto& a : adains_) {
      detail::fill_normal(a.alpha.weight.value, rng, 0.0, kInitStd);
      a.alpha.bias.value.fill(T{1});
      detail::fill_normal(a.beta.weight.value, rng, 0.0, kInitStd);
      a.beta.bias.value.zero();
    }
    for (auto& b : norms_) {
      detail::fill_normal(b.gamma.value, rng, 1.0, kInitStd);
      b.beta.value.zero();
    }
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    if (cfg_.mode != GeneratorMode::none) mapping_.collect("mapping", out);
    for (std::size_t i = 0; i < deconvs_.size(); ++i)
      deconvs_[i].collect("deconv" + std::to_string(i), out);
    for (std::size_t i = 0; i < adains_.size(); ++i)
      adains_[i].collect("adain" + std::to_string(i), out);
    for (std::size_t i = 0; i < norms_.size(); ++i)
      norms_[i].collect("bn" + std::to_string(i), out);
    return out;
  }

  std::vector<BufferRef<T>> buffers() {
    std::vector<BufferRef<T>> out;
    for (std::size_t i = 0; i < norms_.size(); ++i)
      norms_[i].collect_buffers("bn" + std::to_string(i), out);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.param->zero_grad();
  }

 private:
  GeneratorConfig cfg_;
  std::size_t image_size_ = 0;
  MappingNetwork<T> mapping_{0, 0};
  std::vector<ConvTranspose2d<T>> deconvs_;
  std::vector<AdaIN<T>> adains_;
  std::vector<BatchNorm2d<T>> norms_;
  std::vector<ActivationLayer<T>> acts_;
  Tensor<T> style_;
  std::vector<std::size_t> trace_;
};

// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
  ChannelPlan channels = kDiscriminatorChannels;
  bool spectral_norm = true;
};

template <typename T>
class Discriminator {
 public:
  Discriminator() : Discriminator(DiscriminatorConfig{}) {}
  explicit Discriminator(DiscriminatorConfig cfg) : cfg_(std::move(cfg)) {
    const auto& ch = cfg_.channels;
    if (ch.size() < 3) throw ConfigError("discriminator channel plan needs at least 3 entries");
    if (ch.back() != 1) throw ConfigError("discriminator must end with a single channel");
    const std::size_t layers = ch.size() - 1;
    image_size_ = image_size_for(layers);
    for (std::size_t i = 0; i < layers; ++i) {
      const bool last = i + 1 == layers;
      const ConvGeometry g = last ? ConvGeometry{4, 1, 0} : ConvGeometry{4, 2, 1};
      convs_.emplace_back(ch[i], ch[i + 1], g, cfg_.spectral_norm);
      if (i > 0 && !last) norms_.emplace_back(ch[i + 1]);
      acts_.emplace_back(last ? Activation<T>::sigmoid()
                              : Activation<T>::leaky_relu(T(kDiscriminatorSlope)));
    }
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  bool spectral_norm() const { return cfg_.spectral_norm; }
  std::size_t image_size() const { return image_size_; }
  std::size_t layers() const { return convs_.size(); }
  Conv2d<T>& conv(std::size_t i) { return convs_.at(i); }
  BatchNorm2d<T>& norm(std::size_t i) { return norms_.at(i); }
  const std::vector<std::size_t>& spatial_trace() const { return trace_; }

  /// images [N, 3, S, S] -> probabilities [N]
  Tensor<T> forward(const Tensor<T>& x, const Pass& pass) {
    require_rank(x, 4, "discriminator input");
    if (x.dim(1) != cfg_.channels.front() || x.dim(2) != image_size_ || x.dim(3) != image_size_)
      throw DimensionError("discriminator: expected (N," +
                           std::to_string(cfg_.channels.front()) + "," +
                           std::to_string(image_size_) + "," + std::to_string(image_size_) +
                           ") input, got " + shape_string(x.shape()));
    const std::size_t n = x.dim(0);
    trace_.clear();
    Tensor<T> h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i].forward(h, pass);
      if (has_norm(i)) h = norms_[i - 1].forward(h, pass);
      h = acts_[i].forward(h);
      trace_.push_back(h.dim(2));
    }
    h.reshape(Shape{n});
    return h;
  }

  /// Convenience form: training advances every power-iteration buffer and
  /// updates batch-norm running stats; otherwise nothing is mutated.
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return forward(x, training ? passes::train : passes::eval);
  }

  /// grad wrt probabilities [N] -> grad wrt images.
  Tensor<T> backward(const Tensor<T>& grad_probs, bool param_grads = true) {
    const std::size_t n = grad_probs.size();
    Tensor<T> g = grad_probs;
    g.reshape(Shape{n, 1, 1, 1});
    for (std::size_t i = convs_.size(); i-- > 0;) {
      g = acts_[i].backward(g);
      if (has_norm(i)) g = norms_[i - 1].backward(g, param_grads);
      g = convs_[i].backward(g, param_grads);
    }
    return g;
  }

  void init(Rng& rng) {
    for (auto& c : convs_) {
      detail::fill_normal(c.weight.value, rng, 0.0, kInitStd);
      if (auto* sn = c.spectral()) detail::init_unit_vector(sn->state.u, rng);
    }
    for (auto& b : norms_) {
      detail::fill_normal(b.gamma.value, rng, 1.0, kInitStd);
      b.beta.value.zero();
    }
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect("conv" + std::to_string(i), out);
    for (std::size_t i = 0; i < norms_.size(); ++i)
      norms_[i].collect("bn" + std::to_string(i + 1), out);
    return out;
  }

  std::vector<BufferRef<T>> buffers() {
    std::vector<BufferRef<T>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect_buffers("conv" + std::to_string(i), out);
    for (std::size_t i = 0; i < norms_.size(); ++i)
      norms_[i].collect_buffers("bn" + std::to_string(i + 1), out);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.param->zero_grad();
  }

 private:
  bool has_norm(std::size_t i) const { return i > 0 && i + 1 < convs_.size(); }

  DiscriminatorConfig cfg_;
  std::size_t image_size_ = 0;
  std::vector<Conv2d<T>> convs_;
  std::vector<BatchNorm2d<T>> norms_;
  std::vector<ActivationLayer<T>> acts_;
  std::vector<std::size_t> trace_;
};

// ---------------------------------------------------------------------------

/// DCGAN-style initialization: conv, deconv and linear weights ~ N(0, 0.02^2),
/// batch-norm gamma ~ N(1, 0.02^2) and beta = 0, AdaIN scale bias 1 and shift
/// bias 0, spectral-norm u a random unit vector.
template <typename Net>
void init_weights(Net& net, std::uint64_t seed) {
  Rng rng(seed);
  net.init(rng);
}

template <typename Net>
std::size_t count_parameters(Net& net) {
  std::size_t total = 0;
  for (const auto& p : net.parameters()) total += p.param->value.size();
  return total;
}

template <typename T>
std::size_t count_parameters(MappingNetwork<T>& net) {
  std::vector<ParamRef<T>> out;
  net.collect("mapping", out);
  std::size_t total = 0;
  for (const auto& p : out) total += p.param->value.size();
  return total;
}

/// z_k = (1 - t_k) z1 + t_k z2 with t_k = k / (steps - 1).
template <typename T>
std::vector<std::vector<T>> interpolate_latents(std::span<const T> z1, std::span<const T> z2,
                                                std::size_t steps) {
  if (steps < 2) throw ArgumentError("interpolate_latents: steps must be >= 2");
  if (z1.size() != z2.size()) throw DimensionError("interpolate_latents: width mismatch");
  std::vector<std::vector<T>> out(steps, std::vector<T>(z1.size()));
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = double(k) / double(steps - 1);
    for (std::size_t i = 0; i < z1.size(); ++i)
      out[k][i] = static_cast<T>((1.0 - t) * double(z1[i]) + t * double(z2[i]));
  }
  return out;
}

}  // namespace ssd
