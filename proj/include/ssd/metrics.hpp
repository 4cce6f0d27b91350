#pragma once

// Generation-fidelity metrics: feature extraction, Gaussian moments, PSD
// square root, Frechet distance and polynomial-kernel MMD.

#include <dlfcn.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssd/artifacts.hpp"
#include "ssd/data.hpp"
#include "ssd/errors.hpp"
#include "ssd/image_io.hpp"
#include "ssd/parallel.hpp"
#include "ssd/training.hpp"

namespace ssd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Maps one square RGB image (0..255 scale) of side input_size() to a
/// feature row of width dim().
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t input_size() const = 0;
  virtual bool thread_safe() const { return true; }
  virtual void extract(const RealImage& img, double* out) const = 0;
};

/// Built-in toy extractor on 32x32 inputs scaled to [0, 1]. Per channel:
/// mean and variance of each 2x2 grid cell (24 values), then global mean,
/// variance, third and fourth central moments (12 values).
class PatchStatsExtractor final : public FeatureExtractor {
 public:
  static constexpr std::size_t kInputSize = 32;
  static constexpr std::size_t kDim = 36;

  std::string name() const override { return "patch-stats"; }
  std::size_t dim() const override { return kDim; }
  std::size_t input_size() const override { return kInputSize; }

  void extract(const RealImage& img, double* out) const override {
    const std::size_t s = kInputSize, half = s / 2;
    std::size_t k = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t qy = 0; qy < 2; ++qy)
        for (std::size_t qx = 0; qx < 2; ++qx) {
          double sum = 0.0, sq = 0.0;
          for (std::size_t y = qy * half; y < (qy + 1) * half; ++y)
            for (std::size_t x = qx * half; x < (qx + 1) * half; ++x) {
              const double v = img.at(y, x, c) / 255.0;
              sum += v;
              sq += v * v;
            }
          const double n = double(half * half);
          const double mean = sum / n;
          out[k++] = mean;
          out[k++] = std::max(0.0, sq / n - mean * mean);
        }
    for (std::size_t c = 0; c < 3; ++c) {
      double sum = 0.0;
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) sum += img.at(y, x, c) / 255.0;
      const double n = double(s * s);
      const double mean = sum / n;
      double m2 = 0.0, m3 = 0.0, m4 = 0.0;
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const double d = img.at(y, x, c) / 255.0 - mean;
          m2 += d * d;
          m3 += d * d * d;
          m4 += d * d * d * d;
        }
      out[k++] = mean;
      out[k++] = m2 / n;
      out[k++] = m3 / n;
      out[k++] = m4 / n;
    }
  }
};

/// Extractor provided by a shared library exporting the C functions
///   const char* ssd_plugin_name(void);
///   size_t ssd_plugin_dim(void);
///   size_t ssd_plugin_input_size(void);
///   int ssd_plugin_extract(const double* hwc, size_t h, size_t w, double* out);
/// and optionally int ssd_plugin_init(const char* arg), called once with the
/// text after the first comma of the descriptor (typically a weights file).
/// `hwc` holds interleaved RGB on the 0..255 scale; nonzero returns are errors.
class PluginExtractor final : public FeatureExtractor {
 public:
  explicit PluginExtractor(const std::filesystem::path& library, const std::string& arg = {}) {
    handle_.reset(dlopen(library.c_str(), RTLD_NOW | RTLD_LOCAL));
    if (!handle_) throw IoError("cannot load extractor plugin " + library.string() + ": " + dlerror());
    name_fn_ = symbol<NameFn>("ssd_plugin_name");
    dim_fn_ = symbol<SizeFn>("ssd_plugin_dim");
    size_fn_ = symbol<SizeFn>("ssd_plugin_input_size");
    extract_fn_ = symbol<ExtractFn>("ssd_plugin_extract");
    if (auto init = reinterpret_cast<InitFn>(dlsym(handle_.get(), "ssd_plugin_init"))) {
      if (init(arg.c_str()) != 0)
        throw ArgumentError("extractor plugin " + library.string() + " failed to initialise");
    } else if (!arg.empty()) {
      throw ArgumentError("extractor plugin " + library.string() + " takes no argument");
    }
    if (dim() == 0 || input_size() == 0)
      throw ArgumentError("extractor plugin " + library.string() + " reports a zero dimension");
  }

  std::string name() const override { return name_fn_(); }
  std::size_t dim() const override { return dim_fn_(); }
  std::size_t input_size() const override { return size_fn_(); }
  bool thread_safe() const override { return false; }

  void extract(const RealImage& img, double* out) const override {
    if (extract_fn_(img.pixels.data(), img.height, img.width, out) != 0)
      throw ArgumentError("extractor plugin " + name() + " rejected an image");
  }

 private:
  using NameFn = const char* (*)();
  using SizeFn = std::size_t (*)();
  using ExtractFn = int (*)(const double*, std::size_t, std::size_t, double*);
  using InitFn = int (*)(const char*);

  struct Closer {
    void operator()(void* h) const { dlclose(h); }
  };

  template <typename Fn>
  Fn symbol(const char* name) {
    auto* s = dlsym(handle_.get(), name);
    if (!s) throw ArgumentError(std::string("extractor plugin lacks symbol ") + name);
    return reinterpret_cast<Fn>(s);
  }

  std::unique_ptr<void, Closer> handle_;
  NameFn name_fn_ = nullptr;
  SizeFn dim_fn_ = nullptr;
  SizeFn size_fn_ = nullptr;
  ExtractFn extract_fn_ = nullptr;
};

/// "toy" or "plugin:<library>[,<argument>]".
inline std::unique_ptr<FeatureExtractor> make_extractor(const std::string& descriptor) {
  if (descriptor == "toy" || descriptor == "patch-stats") return std::make_unique<PatchStatsExtractor>();
  if (descriptor.rfind("plugin:", 0) == 0) {
    const std::string rest = descriptor.substr(7);
    const auto comma = rest.find(',');
    if (rest.empty() || comma == 0) throw ArgumentError("plugin extractor needs a library path");
    if (comma == std::string::npos) return std::make_unique<PluginExtractor>(rest);
    return std::make_unique<PluginExtractor>(rest.substr(0, comma), rest.substr(comma + 1));
  }
  throw ArgumentError("unknown extractor '" + descriptor + "' (expected toy or plugin:<path>)");
}

/// Feature matrix with one row per image, in input order. Images must
/// already be at the extractor's input size.
inline Matrix extract_features(const std::vector<RealImage>& images, const FeatureExtractor& extractor) {
  const std::size_t s = extractor.input_size(), d = extractor.dim();
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].height != s || images[i].width != s || images[i].pixels.size() != s * s * 3)
      throw ArgumentError("extract_features: image " + std::to_string(i) + " is " +
                          std::to_string(images[i].width) + "x" + std::to_string(images[i].height) +
                          ", extractor " + extractor.name() + " needs " + std::to_string(s) + "x" +
                          std::to_string(s));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(images.size(), d);
  parallel_for(
      images.size(), [&](std::size_t i) { extractor.extract(images[i], rows.data() + i * d); },
      extractor.thread_safe() ? worker_count() : 1);
  if (!rows.allFinite()) throw NumericError("extract_features: non-finite feature from " + extractor.name());
  return rows;
}

struct GaussianStats {
  Vector mu;
  Matrix sigma;
};

/// Sample mean and unbiased (n - 1) covariance of the rows.
inline GaussianStats gaussian_stats(const Matrix& features) {
  const auto n = features.rows();
  if (n < 2) throw ArgumentError("gaussian_stats: need at least 2 samples, got " + std::to_string(n));
  GaussianStats s;
  s.mu = features.colwise().mean().transpose();
  const Matrix centered = features.rowwise() - s.mu.transpose();
  s.sigma = (centered.transpose() * centered) / double(n - 1);
  s.sigma = 0.5 * (s.sigma + s.sigma.transpose()).eval();
  return s;
}

inline constexpr double kSymmetryTolerance = 1e-8;
inline constexpr double kNegativeEigenWarn = 1e-8;

/// Symmetric PSD square root by eigendecomposition; negative eigenvalues are
/// clamped to zero, and those below -1e-8 * lambda_max add a warning.
inline Matrix matrix_sqrt_psd(const Matrix& a, std::vector<std::string>* warnings = nullptr) {
  if (a.rows() != a.cols()) throw ArgumentError("matrix_sqrt_psd: matrix is not square");
  if (a.size() == 0) return a;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance * scale)
    throw ArgumentError("matrix_sqrt_psd: matrix is not symmetric");
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericError("matrix_sqrt_psd: eigendecomposition failed");
  Vector lambda = eig.eigenvalues();
  const double top = std::max(0.0, lambda.maxCoeff());
  if (warnings && lambda.minCoeff() < -kNegativeEigenWarn * top) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "matrix_sqrt_psd: clamped eigenvalue %.3e (largest %.3e)",
                  lambda.minCoeff(), top);
    warnings->emplace_back(buf);
  }
  lambda = lambda.cwiseMax(0.0).cwiseSqrt();
  const Matrix& q = eig.eigenvectors();
  Matrix root = q * lambda.asDiagonal() * q.transpose();
  return 0.5 * (root + root.transpose());
}

inline constexpr double kNegativeDistanceClamp = 1e-6;

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b,
                               std::vector<std::string>* warnings = nullptr) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != a.mu.size() || b.sigma.rows() != b.mu.size())
    throw ArgumentError("frechet_distance: dimension mismatch");
  const Matrix root_a = matrix_sqrt_psd(a.sigma, warnings);
  const Matrix inner = root_a * b.sigma * root_a;
  const Matrix cross = matrix_sqrt_psd(0.5 * (inner + inner.transpose()), warnings);
  const double d = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross.trace();
  if (d < 0.0) {
    if (d < -kNegativeDistanceClamp)
      throw NumericError("frechet_distance: negative result " + std::to_string(d));
    return 0.0;
  }
  return d;
}

namespace detail {
inline double poly_kernel(const Matrix& x, Eigen::Index i, const Matrix& y, Eigen::Index j) {
  const Eigen::Index d = x.cols();
  double dot = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) dot += x(i, k) * y(j, k);
  const double t = dot / double(d) + 1.0;
  return t * t * t;
}

inline double offdiag_mean(const Matrix& x) {
  const Eigen::Index n = x.rows();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) sum += poly_kernel(x, i, x, j);
  return sum / (double(n) * double(n - 1));
}

inline double diag_mean(const Matrix& x) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) sum += poly_kernel(x, i, x, i);
  return sum / double(x.rows());
}
}  // namespace detail

/// Unbiased squared MMD over all pairs under k(x, y) = (x.y / d + 1)^3.
inline double kid_mmd(const Matrix& real, const Matrix& fake) {
  if (real.rows() < 2 || fake.rows() < 2) throw ArgumentError("kid_mmd: need at least 2 rows per side");
  if (real.cols() != fake.cols() || real.cols() == 0) throw ArgumentError("kid_mmd: feature width mismatch");
  double cross = 0.0;
  for (Eigen::Index i = 0; i < real.rows(); ++i)
    for (Eigen::Index j = 0; j < fake.rows(); ++j) cross += detail::poly_kernel(real, i, fake, j);
  cross /= double(real.rows()) * double(fake.rows());
  return detail::offdiag_mean(real) + detail::offdiag_mean(fake) - 2.0 * cross;
}

/// Lower bound of the unbiased estimator: the biased MMD is a squared RKHS
/// norm, so kid_mmd >= -diag_mean(real)/(n-1) - diag_mean(fake)/(m-1).
inline double kid_floor(const Matrix& real, const Matrix& fake) {
  return -detail::diag_mean(real) / double(real.rows() - 1) -
         detail::diag_mean(fake) / double(fake.rows() - 1);
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fake images come from a directory, or from `n_samples` generator draws
/// of a checkpoint with latents seeded by `seed`.
struct FakeSource {
  std::filesystem::path dir;
  std::filesystem::path checkpoint;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

struct MetricSelection {
  bool fid = true;
  bool clean_fid = true;
  bool kid = true;
};

inline MetricSelection parse_metric_selection(const std::string& list) {
  MetricSelection sel{false, false, false};
  std::size_t pos = 0;
  while (pos <= list.size()) {
    const auto comma = list.find(',', pos);
    const std::string item = list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (item == "fid") sel.fid = true;
    else if (item == "clean-fid" || item == "clean_fid") sel.clean_fid = true;
    else if (item == "kid") sel.kid = true;
    else throw ArgumentError("unknown metric '" + item + "' (expected fid, clean-fid, kid)");
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return sel;
}

struct MetricReport {
  std::optional<double> fid;
  std::optional<double> clean_fid;
  std::optional<double> kid;
  std::optional<double> kid_floor;
  std::string extractor_name;
  std::string resize_mode;
  std::size_t n_real = 0;
  std::size_t n_fake = 0;
  std::vector<std::string> warnings;
};

inline std::string format_report(const MetricReport& r) {
  auto num = [](const std::optional<double>& v) { return v ? detail::format_double(*v) : std::string("na"); };
  return "fid=" + num(r.fid) + " clean_fid=" + num(r.clean_fid) + " kid=" + num(r.kid) +
         " kid_floor=" + num(r.kid_floor) + " extractor=" + r.extractor_name +
         " resize_mode=" + r.resize_mode + " n_real=" + std::to_string(r.n_real) +
         " n_fake=" + std::to_string(r.n_fake);
}

inline constexpr const char* kReportCsvHeader =
    "fid,clean_fid,kid,kid_floor,extractor,resize_mode,n_real,n_fake";

/// Appends one row, writing the header first if the file is new or empty.
inline void append_report_csv(const MetricReport& r, const std::filesystem::path& path) {
  std::error_code ec;
  const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open " + path.string() + " for appending");
  auto num = [](const std::optional<double>& v) { return v ? detail::format_double(*v) : std::string(); };
  if (fresh) out << kReportCsvHeader << '\n';
  out << num(r.fid) << ',' << num(r.clean_fid) << ',' << num(r.kid) << ',' << num(r.kid_floor) << ','
      << r.extractor_name << ',' << r.resize_mode << ',' << r.n_real << ',' << r.n_fake << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<RealImage> load_image_dir(const std::filesystem::path& dir) {
  std::vector<std::string> warnings;
  std::size_t skipped = 0;
  const auto records = scan_image_dir(dir, 1, warnings, skipped);
  std::vector<RealImage> images(records.size());
  parallel_for(records.size(), [&](std::size_t i) { images[i] = to_real(records[i].load()); });
  return images;
}

/// Generated images quantized to 8 bits, exactly as a saved sample would be.
inline std::vector<RealImage> generate_images(const Checkpoint& ckpt, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ArgumentError("number of samples must be >= 1");
  Generator<float> g = load_generator<float>(ckpt);
  const auto z = latents_for_seed<float>(n, g.latent_dim(), seed);
  const auto batch = generate_from_latents(g, z);
  const std::size_t s = g.image_size(), per = 3 * s * s;
  std::vector<RealImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> one(Shape{3, s, s}, std::vector<float>(batch.data() + i * per, batch.data() + (i + 1) * per));
    out.push_back(to_real(denormalize_image(one)));
  }
  return out;
}

inline std::vector<RealImage> load_fake_images(const FakeSource& src) {
  if (!src.dir.empty() && !src.checkpoint.empty())
    throw ArgumentError("give either a fake image directory or a checkpoint, not both");
  if (!src.dir.empty()) return load_image_dir(src.dir);
  if (!src.checkpoint.empty()) return generate_images(load_checkpoint(src.checkpoint), src.n_samples, src.seed);
  throw ArgumentError("no fake image source given (directory or checkpoint)");
}

inline Matrix features_at(const std::vector<RealImage>& images, const FeatureExtractor& ex, ResizeMode mode) {
  const std::size_t s = ex.input_size();
  std::vector<RealImage> resized(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    resized[i] = (images[i].height == s && images[i].width == s) ? images[i] : resize(images[i], s, s, mode);
  });
  return extract_features(resized, ex);
}

/// Metrics on in-memory image sets. "fid" resizes both sides with naive
/// bilinear sampling; "clean_fid" and "kid" use the anti-aliased path.
inline MetricReport evaluate_images(const std::vector<RealImage>& real, const std::vector<RealImage>& fake,
                                    const FeatureExtractor& ex, MetricSelection sel = {}) {
  if (real.size() < 2 || fake.size() < 2)
    throw ArgumentError("evaluate: need at least 2 images per side (real " + std::to_string(real.size()) +
                        ", fake " + std::to_string(fake.size()) + ")");
  if (!sel.fid && !sel.clean_fid && !sel.kid) throw ArgumentError("evaluate: no metric selected");
  MetricReport r;
  r.extractor_name = ex.name();
  r.n_real = real.size();
  r.n_fake = fake.size();
  std::vector<std::string> modes;
  if (sel.fid) {
    const auto fr = features_at(real, ex, ResizeMode::naive_bilinear);
    const auto ff = features_at(fake, ex, ResizeMode::naive_bilinear);
    r.fid = frechet_distance(gaussian_stats(fr), gaussian_stats(ff), &r.warnings);
    modes.push_back("fid:" + to_string(ResizeMode::naive_bilinear));
  }
  if (sel.clean_fid || sel.kid) {
    const auto fr = features_at(real, ex, ResizeMode::clean_antialiased);
    const auto ff = features_at(fake, ex, ResizeMode::clean_antialiased);
    if (sel.clean_fid) {
      r.clean_fid = frechet_distance(gaussian_stats(fr), gaussian_stats(ff), &r.warnings);
      modes.push_back("clean_fid:" + to_string(ResizeMode::clean_antialiased));
    }
    if (sel.kid) {
      r.kid = kid_mmd(fr, ff);
      r.kid_floor = kid_floor(fr, ff);
      modes.push_back("kid:" + to_string(ResizeMode::clean_antialiased));
    }
  }
  for (std::size_t i = 0; i < modes.size(); ++i) r.resize_mode += (i ? ";" : "") + modes[i];
  return r;
}

/// FID and KID with a single resize mode applied to both sides.
inline MetricReport evaluate_images(const std::vector<RealImage>& real, const std::vector<RealImage>& fake,
                                    const FeatureExtractor& ex, ResizeMode mode) {
  if (real.size() < 2 || fake.size() < 2)
    throw ArgumentError("evaluate: need at least 2 images per side (real " + std::to_string(real.size()) +
                        ", fake " + std::to_string(fake.size()) + ")");
  MetricReport r;
  r.extractor_name = ex.name();
  r.resize_mode = to_string(mode);
  r.n_real = real.size();
  r.n_fake = fake.size();
  const auto fr = features_at(real, ex, mode);
  const auto ff = features_at(fake, ex, mode);
  r.fid = frechet_distance(gaussian_stats(fr), gaussian_stats(ff), &r.warnings);
  r.kid = kid_mmd(fr, ff);
  r.kid_floor = kid_floor(fr, ff);
  return r;
}

inline MetricReport evaluate(const std::filesystem::path& real_dir, const FakeSource& fake,
                             const FeatureExtractor& ex, MetricSelection sel = {}) {
  return evaluate_images(load_image_dir(real_dir), load_fake_images(fake), ex, sel);
}

inline MetricReport evaluate(const std::filesystem::path& real_dir, const FakeSource& fake,
                             const FeatureExtractor& ex, ResizeMode mode) {
  return evaluate_images(load_image_dir(real_dir), load_fake_images(fake), ex, mode);
}

}  // namespace ssd
