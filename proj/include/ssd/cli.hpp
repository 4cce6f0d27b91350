#pragma once

// Command implementations behind the `ssd` tool. Each returns normally on
// success and throws ssd::Error on failure; exit_code_for maps errors to
// process exit codes.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ssd/artifacts.hpp"
#include "ssd/data.hpp"
#include "ssd/errors.hpp"
#include "ssd/metrics.hpp"
#include "ssd/networks.hpp"
#include "ssd/training.hpp"

namespace ssd::cli {

enum ExitCode : int {
  ok = 0,
  failure = 1,
  usage = 2,
  bad_argument = 3,
  bad_config = 4,
  io_failure = 5,
  integrity_failure = 6,
  version_mismatch = 7,
  numeric_failure = 8,
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension:
    case ErrorKind::argument: return bad_argument;
    case ErrorKind::config: return bad_config;
    case ErrorKind::io: return io_failure;
    case ErrorKind::integrity: return integrity_failure;
    case ErrorKind::version: return version_mismatch;
    case ErrorKind::numeric: return numeric_failure;
  }
  return failure;
}

inline std::string format_count(std::size_t n) {
  std::string digits = std::to_string(n), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path config;
  std::filesystem::path data_dir;
  std::filesystem::path val_dir;
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  bool no_spectral_norm = false;
  std::optional<std::string> generator_mode;
  std::optional<int> data_fraction;
};

/// Defaults, then the config file, then explicit flags.
inline TrainConfig resolve_train_config(const TrainOptions& o) {
  TrainConfig c = o.config.empty() ? TrainConfig{} : read_config_file(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.no_spectral_norm) c.spectral_norm = false;
  if (o.generator_mode) c.generator_mode = parse_generator_mode(*o.generator_mode);
  if (o.data_fraction) c.data_fraction = *o.data_fraction;
  c.validate();
  return c;
}

inline void cmd_train(const TrainOptions& o, std::ostream& out) {
  if (o.data_dir.empty()) throw ArgumentError("--data-dir is required");
  if (o.out_dir.empty()) throw ArgumentError("--out-dir is required");
  const TrainConfig cfg = resolve_train_config(o);
  const DatasetSplit split = load_dataset(o.data_dir, o.val_dir);
  for (const auto& w : split.warnings) out << "warning: " << w << '\n';
  const ImageSet data = prepare_training_set(split, cfg);
  std::filesystem::create_directories(o.out_dir);
  write_config_file(cfg, o.out_dir / "config.txt");
  out << "training on " << data.count << " of " << split.train.size() << " images (" << cfg.data_fraction
      << "%), " << cfg.epochs << " epochs, batch " << cfg.batch_size << '\n';
  const auto result = run_training(cfg, data, RunOutputs{o.out_dir});
  for (const auto& e : result.log.epochs)
    out << "epoch " << e.epoch << " val_loss=" << detail::format_double(e.val_loss)
        << (e.improved ? " (best)" : "") << '\n';
  out << "steps=" << result.log.steps.size() << " best=" << (o.out_dir / "best.ckpt").string() << '\n';
}

// ---------------------------------------------------------------------------

struct GenerateOptions {
  std::filesystem::path checkpoint;
  std::size_t n = 16;
  std::uint64_t seed = 0;
  std::size_t cols = 0;  // 0: ceil(sqrt(n))
  std::filesystem::path out = "samples.png";
};

inline std::size_t default_columns(std::size_t n) {
  std::size_t c = static_cast<std::size_t>(std::sqrt(double(n)));
  while (c * c < n) ++c;
  return std::max<std::size_t>(c, 1);
}

inline void cmd_generate(const GenerateOptions& o, std::ostream& out) {
  if (o.n == 0) throw ArgumentError("--n must be >= 1");
  Generator<float> g = load_generator<float>(load_checkpoint(o.checkpoint));
  const auto images = generate_from_latents(g, latents_for_seed<float>(o.n, g.latent_dim(), o.seed));
  write_sample_grid(images, o.cols ? o.cols : default_columns(o.n), o.out);
  out << "wrote " << o.n << " samples to " << o.out.string() << '\n';
}

struct InterpolateOptions {
  std::filesystem::path checkpoint;
  std::uint64_t seed_a = 0;
  std::uint64_t seed_b = 1;
  std::size_t steps = 4;
  std::filesystem::path out = "interpolation.png";
  std::filesystem::path frames_dir;
};

/// One row of frames along the straight line from the latent of seed_a to
/// that of seed_b; each endpoint latent is what `generate --n 1` draws.
inline void cmd_interpolate(const InterpolateOptions& o, std::ostream& out) {
  if (o.steps < 2) throw ArgumentError("--steps must be >= 2");
  Generator<float> g = load_generator<float>(load_checkpoint(o.checkpoint));
  const std::size_t d = g.latent_dim();
  const auto za = latents_for_seed<float>(1, d, o.seed_a);
  const auto zb = latents_for_seed<float>(1, d, o.seed_b);
  const auto path = interpolate_latents<float>(za.span(), zb.span(), o.steps);
  Tensor<float> z(Shape{o.steps, d});
  for (std::size_t i = 0; i < o.steps; ++i) std::copy(path[i].begin(), path[i].end(), z.data() + i * d);
  const auto frames = generate_from_latents(g, z);
  write_sample_grid(frames, o.steps, o.out);
  if (!o.frames_dir.empty()) {
    std::filesystem::create_directories(o.frames_dir);
    const std::size_t per = frames.size() / o.steps, s = g.image_size();
    for (std::size_t i = 0; i < o.steps; ++i) {
      Tensor<float> one(Shape{1, 3, s, s}, std::vector<float>(frames.data() + i * per, frames.data() + (i + 1) * per));
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu.png", i);
      write_sample_grid(one, 1, o.frames_dir / name);
    }
  }
  out << "wrote " << o.steps << " frames to " << o.out.string() << '\n';
}

// ---------------------------------------------------------------------------

struct EvaluateOptions {
  std::filesystem::path real_dir;
  std::filesystem::path fake_dir;
  std::filesystem::path checkpoint;
  std::size_t n_samples = 64;
  std::uint64_t seed = 0;
  std::string extractor = "toy";
  std::string metrics = "fid,clean-fid,kid";
  std::filesystem::path out;
  std::filesystem::path csv;
};

inline MetricReport cmd_evaluate(const EvaluateOptions& o, std::ostream& out) {
  if (o.real_dir.empty()) throw ArgumentError("--real-dir is required");
  if (o.fake_dir.empty() == o.checkpoint.empty())
    throw ArgumentError("exactly one of --fake-dir or --checkpoint is required");
  const auto ex = make_extractor(o.extractor);
  const MetricReport r =
      evaluate(o.real_dir, FakeSource{o.fake_dir, o.checkpoint, o.n_samples, o.seed}, *ex,
               parse_metric_selection(o.metrics));
  for (const auto& w : r.warnings) out << "warning: " << w << '\n';
  const std::string line = format_report(r);
  out << line << '\n';
  if (!o.out.empty()) {
    const std::string text = line + "\n";
    write_file_atomic(o.out, text.data(), text.size());
  }
  if (!o.csv.empty()) append_report_csv(r, o.csv);
  return r;
}

// ---------------------------------------------------------------------------

struct ParamCounts {
  std::size_t mapping = 0;
  std::size_t generator = 0;
  std::size_t discriminator = 0;
  std::size_t total() const { return generator + discriminator; }
};

/// "ours" is the full model; "dcgan-control" drops the mapping network,
/// AdaIN and spectral normalization and uses batch norm throughout.
inline ParamCounts count_architecture(const std::string& arch) {
  GeneratorConfig gc;
  DiscriminatorConfig dc;
  if (arch == "dcgan-control") {
    gc.mode = GeneratorMode::none;
    dc.spectral_norm = false;
  } else if (arch != "ours") {
    throw ArgumentError("unknown --arch '" + arch + "' (expected ours or dcgan-control)");
  }
  Generator<float> g(gc);
  Discriminator<float> d(dc);
  ParamCounts c;
  c.generator = count_parameters(g);
  c.discriminator = count_parameters(d);
  if (gc.mode != GeneratorMode::none) c.mapping = count_parameters(g.mapping());
  return c;
}

inline ParamCounts cmd_count_params(const std::string& arch, std::ostream& out) {
  const ParamCounts c = count_architecture(arch);
  char millions[32];
  std::snprintf(millions, sizeof millions, "%.3fM", double(c.total()) / 1e6);
  out << "arch " << arch << '\n'
      << "mapping network " << format_count(c.mapping) << '\n'
      << "generator " << format_count(c.generator) << '\n'
      << "discriminator " << format_count(c.discriminator) << '\n'
      << "total " << format_count(c.total()) << " (" << millions << ")\n";
  return c;
}

// ---------------------------------------------------------------------------

inline void cmd_inspect(const std::filesystem::path& checkpoint, std::ostream& out) {
  const Checkpoint c = load_checkpoint(checkpoint);
  for (const auto& [k, v] : c.meta) out << k << " = " << v << '\n';
  std::size_t floats = 0;
  for (const auto& t : c.tensors) {
    out << t.name << ' ' << shape_string(t.shape) << '\n';
    floats += t.data.size();
  }
  out << c.tensors.size() << " tensors, " << format_count(floats) << " values\n";
}

}  // namespace ssd::cli
