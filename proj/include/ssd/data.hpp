#pragma once

// Image ingestion, deterministic splits and subsets, resizing and batching.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ssd/errors.hpp"
#include "ssd/image_io.hpp"
#include "ssd/parallel.hpp"
#include "ssd/random.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

inline constexpr std::size_t kTrainImageSize = 64;

struct ImageRecord {
  std::filesystem::path path;
  std::size_t height = 0;
  std::size_t width = 0;

  Image8 load() const { return decode_image(path); }
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetSplit {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> val;
  int fraction_applied = 100;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

/// Lists decodable images in `dir`, sorted by file name. Files that fail to
/// decode or are smaller than `min_side` are skipped with a warning.
inline std::vector<ImageRecord> scan_image_dir(const std::filesystem::path& dir,
                                               std::size_t min_side,
                                               std::vector<std::string>& warnings,
                                               std::size_t& skipped) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && has_image_extension(entry.path())) files.push_back(entry.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

  std::vector<std::optional<ImageRecord>> slots(files.size());
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    try {
      const Image8 img = decode_image(files[i]);
      if (img.height < min_side || img.width < min_side) {
        errors[i] = files[i].string() + ": " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + " is smaller than " + std::to_string(min_side);
        return;
      }
      slots[i] = ImageRecord{files[i], img.height, img.width};
    } catch (const IoError& e) {
      errors[i] = e.what();
    }
  });
  std::vector<ImageRecord> records;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (slots[i]) {
      records.push_back(std::move(*slots[i]));
    } else {
      warnings.push_back("skipped " + errors[i]);
      ++skipped;
    }
  }
  if (records.empty()) throw IoError("no usable images in " + dir.string());
  return records;
}

/// Train and validation records. An empty `val_dir` yields an empty
/// validation list.
inline DatasetSplit load_dataset(const std::filesystem::path& train_dir,
                                 const std::filesystem::path& val_dir,
                                 std::size_t min_side = kTrainImageSize) {
  DatasetSplit split;
  split.train = scan_image_dir(train_dir, min_side, split.warnings, split.skipped);
  if (!val_dir.empty()) split.val = scan_image_dir(val_dir, min_side, split.warnings, split.skipped);
  return split;
}

inline bool valid_fraction(int k) { return k == 25 || k == 50 || k == 75 || k == 100; }

/// Seeded shuffle of the training list, keeping the first ceil(K * N / 100).
/// Subsets for the same seed are nested prefixes of one shuffle.
inline DatasetSplit subset_fraction(const DatasetSplit& split, int k_percent, std::uint64_t seed) {
  if (!valid_fraction(k_percent))
    throw ConfigError("data fraction must be one of 25, 50, 75, 100 (got " +
                      std::to_string(k_percent) + ")");
  DatasetSplit out = split;
  Rng rng(seed);
  shuffle(out.train, rng);
  const std::size_t n = out.train.size();
  const std::size_t keep = (static_cast<std::size_t>(k_percent) * n + 99) / 100;
  out.train.resize(keep);
  out.fraction_applied = k_percent;
  return out;
}

// ---------------------------------------------------------------------------
// Resizing. Both resizers use half-pixel-centered coordinates and work on
// each axis separately (rows first, then columns).

namespace detail {

struct AxisTaps {
  std::vector<std::size_t> first;   // first source index per output
  std::vector<std::vector<double>> weights;
};

// Linear interpolation between two neighbours, no prefilter.
inline AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  const double scale = double(in) / double(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (double(i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const double l = src - double(i0);
    t.first.push_back(i0);
    if (i0 + 1 < in)
      t.weights.push_back({1.0 - l, l});
    else
      t.weights.push_back({1.0});
  }
  return t;
}

// Keys cubic, a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

// Cubic filter whose support widens by the downsampling factor.
inline AxisTaps antialias_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  const double scale = double(in) / double(out);
  const double filter_scale = std::max(scale, 1.0);
  const double support = 2.0 * filter_scale;
  for (std::size_t i = 0; i < out; ++i) {
    const double center = (double(i) + 0.5) * scale;
    long lo = static_cast<long>(center - support + 0.5);
    long hi = static_cast<long>(center + support + 0.5);
    lo = std::max(lo, 0L);
    hi = std::min(hi, static_cast<long>(in));
    std::vector<double> w;
    double total = 0.0;
    for (long j = lo; j < hi; ++j) {
      const double v = cubic_kernel((double(j) - center + 0.5) / filter_scale);
      w.push_back(v);
      total += v;
    }
    for (auto& v : w) v /= total;
    t.first.push_back(static_cast<std::size_t>(lo));
    t.weights.push_back(std::move(w));
  }
  return t;
}

// Weighted sum written as anchor + sum w (x - anchor) so a constant signal
// reproduces itself exactly.
inline double apply_taps(const double* src, std::size_t stride, const std::vector<double>& w) {
  const double anchor = src[0];
  double acc = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) acc += w[k] * (src[k * stride] - anchor);
  return anchor + acc;
}

inline RealImage resample(const RealImage& img, std::size_t out_h, std::size_t out_w,
                          const AxisTaps& rows, const AxisTaps& cols) {
  RealImage tmp(img.height, out_w);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        tmp.at(y, x, c) = apply_taps(&img.pixels[(y * img.width + cols.first[x]) * 3 + c], 3,
                                     cols.weights[x]);
  RealImage out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.at(y, x, c) = apply_taps(&tmp.pixels[(rows.first[y] * out_w + x) * 3 + c],
                                     out_w * 3, rows.weights[y]);
  return out;
}

inline void check_resize_args(const RealImage& img, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw ArgumentError("resize: output dimensions must be >= 1");
  if (img.height == 0 || img.width == 0) throw ArgumentError("resize: empty input image");
}

}  // namespace detail

/// Plain bilinear sampling without an anti-aliasing prefilter. Shrinking by
/// large factors aliases high frequencies into the output.
inline RealImage resize_bilinear(const RealImage& img, std::size_t out_h, std::size_t out_w) {
  detail::check_resize_args(img, out_h, out_w);
  return detail::resample(img, out_h, out_w, detail::bilinear_taps(img.height, out_h),
                          detail::bilinear_taps(img.width, out_w));
}

/// Cubic resampling with the filter support scaled by the shrink factor, so
/// frequencies above the output Nyquist rate are removed before sampling.
inline RealImage resize_antialiased(const RealImage& img, std::size_t out_h, std::size_t out_w) {
  detail::check_resize_args(img, out_h, out_w);
  return detail::resample(img, out_h, out_w, detail::antialias_taps(img.height, out_h),
                          detail::antialias_taps(img.width, out_w));
}

enum class ResizeMode { naive_bilinear, clean_antialiased };

inline std::string to_string(ResizeMode m) {
  return m == ResizeMode::naive_bilinear ? "naive_bilinear" : "clean_antialiased";
}

inline RealImage resize(const RealImage& img, std::size_t h, std::size_t w, ResizeMode mode) {
  return mode == ResizeMode::naive_bilinear ? resize_bilinear(img, h, w)
                                            : resize_antialiased(img, h, w);
}

// ---------------------------------------------------------------------------

/// x / 127.5 - 1, laid out (3, H, W).
template <typename T = float>
Tensor<T> normalize_to_tanh_range(const Image8& img) {
  Tensor<T> out(Shape{3, img.height, img.width});
  const std::size_t hw = img.height * img.width;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      out[c * hw + i] = static_cast<T>(double(img.pixels[i * 3 + c]) / 127.5 - 1.0);
  return out;
}

/// Inverse of normalize_to_tanh_range: round(127.5 (x + 1)), clamped.
inline std::uint8_t to_pixel(double x) {
  double v = std::nearbyint(127.5 * (x + 1.0));
  return static_cast<std::uint8_t>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
}

template <typename T>
Image8 denormalize_image(const Tensor<T>& chw) {
  require_rank(chw, 3, "denormalize_image");
  const std::size_t h = chw.dim(1), w = chw.dim(2), hw = h * w;
  Image8 out(h, w);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = to_pixel(chw[c * hw + i]);
  return out;
}

/// Per-epoch seeded shuffle (seed xor epoch) cut into full batches; the
/// trailing partial batch is dropped.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2) throw ConfigError("batch size must be >= 2");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed ^ epoch);
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b + batch_size <= n; b += batch_size)
    batches.emplace_back(order.begin() + b, order.begin() + b + batch_size);
  return batches;
}

/// Training images resized to the model resolution, stored as 8-bit CHW.
struct ImageSet {
  std::size_t count = 0;
  std::size_t size = 0;
  std::vector<std::uint8_t> chw;

  std::size_t image_bytes() const { return 3 * size * size; }

  void push_back(const Image8& img) {
    if (img.height != size || img.width != size)
      throw DimensionError("ImageSet: image is " + std::to_string(img.width) + "x" +
                           std::to_string(img.height) + ", expected " + std::to_string(size));
    const std::size_t hw = size * size;
    const std::size_t off = chw.size();
    chw.resize(off + 3 * hw);
    for (std::size_t i = 0; i < hw; ++i)
      for (std::size_t c = 0; c < 3; ++c) chw[off + c * hw + i] = img.pixels[i * 3 + c];
    ++count;
  }

  /// Normalized batch [B, 3, S, S] in [-1, 1].
  template <typename T>
  Tensor<T> batch(const std::vector<std::size_t>& indices) const {
    const std::size_t per = image_bytes();
    Tensor<T> out(Shape{indices.size(), 3, size, size});
    for (std::size_t b = 0; b < indices.size(); ++b) {
      if (indices[b] >= count) throw ArgumentError("ImageSet: index out of range");
      const std::uint8_t* src = chw.data() + indices[b] * per;
      for (std::size_t i = 0; i < per; ++i)
        out[b * per + i] = static_cast<T>(double(src[i]) / 127.5 - 1.0);
    }
    return out;
  }
};

/// Decodes each record and bilinearly resizes it to size x size.
inline ImageSet prepare_images(const std::vector<ImageRecord>& records,
                               std::size_t size = kTrainImageSize) {
  std::vector<Image8> decoded(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const RealImage img = to_real(records[i].load());
    decoded[i] = (img.height == size && img.width == size) ? quantize(img)
                                                           : quantize(resize_bilinear(img, size, size));
  });
  ImageSet set;
  set.size = size;
  for (const auto& img : decoded) set.push_back(img);
  return set;
}

}  // namespace ssd
