#pragma once

// Persistence: checkpoint container, run configuration text, sample grids
// and the loss CSV. Every writer goes through write_file_atomic.
//
// Checkpoint layout (version 1):
//
//   SSDCKPT 1
//   meta <key>=<value>                       one line per manifest field
//   tensor <name> f32 <d0,d1,...|-> <offset> <nbytes>
//   payload <bytes> <crc32 of payload>
//   manifest_crc32 <crc32 of every byte above this line>
//   end
//   zero padding to a multiple of 64 bytes
//   payload: little-endian float32 blobs, each at a 64-byte aligned offset

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssd/data.hpp"
#include "ssd/errors.hpp"
#include "ssd/image_io.hpp"
#include "ssd/tensor.hpp"
#include "ssd/training_types.hpp"

namespace ssd {

inline constexpr int kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
  friend bool operator==(const CheckpointTensor&, const CheckpointTensor&) = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointTensor> tensors;

  void set(const std::string& key, const std::string& value) { meta[key] = value; }

  const std::string& get(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw IntegrityError("checkpoint is missing field '" + key + "'");
    return it->second;
  }

  bool has_tensor(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(),
                       [&](const auto& t) { return t.name == name; });
  }

  const CheckpointTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw IntegrityError("checkpoint has no tensor '" + name + "'");
  }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    tensors.push_back({name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
  }

  /// Copies a stored tensor into `dst`, which must already have its shape.
  template <typename T>
  void read_into(const std::string& name, Tensor<T>& dst) const {
    const auto& t = tensor(name);
    if (t.shape != dst.shape())
      throw IntegrityError("checkpoint tensor '" + name + "' has shape " + shape_string(t.shape) +
                           ", expected " + shape_string(dst.shape()));
    std::transform(t.data.begin(), t.data.end(), dst.data(),
                   [](float v) { return static_cast<T>(v); });
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::size_t align_up(std::size_t n, std::size_t a) { return (n + a - 1) / a * a; }

inline std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08" PRIx32, v);
  return buf;
}

inline std::uint32_t le32(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

inline std::string shape_token(const Shape& s) {
  if (s.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

inline std::uint64_t parse_u64(const std::string& s, const char* what) {
  std::uint64_t v = 0;
  const char* end = s.data() + s.size();
  auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end)
    throw IntegrityError(std::string("malformed ") + what + " '" + s + "'");
  return v;
}

inline Shape parse_shape_token(const std::string& tok) {
  Shape s;
  if (tok == "-") return s;
  std::size_t pos = 0;
  while (pos <= tok.size()) {
    const std::size_t comma = tok.find(',', pos);
    const std::string part = tok.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    s.push_back(parse_u64(part, "shape"));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return s;
}

inline bool clean_token(const std::string& s) {
  return !s.empty() && s.find_first_of(" \t\r\n") == std::string::npos;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::string head = "SSDCKPT " + std::to_string(kCheckpointVersion) + "\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (k.empty() || k.find_first_of("=\n ") != std::string::npos || v.find('\n') != std::string::npos)
      throw ArgumentError("checkpoint field '" + k + "' cannot be stored");
    head += "meta " + k + "=" + v + "\n";
  }
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : ckpt.tensors) {
    if (!detail::clean_token(t.name)) throw ArgumentError("invalid tensor name '" + t.name + "'");
    if (shape_size(t.shape) != t.data.size())
      throw DimensionError("checkpoint tensor '" + t.name + "' data does not match its shape");
    offset = detail::align_up(offset, kPayloadAlignment);
    offsets.push_back(offset);
    const std::size_t nbytes = t.data.size() * 4;
    head += "tensor " + t.name + " f32 " + detail::shape_token(t.shape) + " " +
            std::to_string(offset) + " " + std::to_string(nbytes) + "\n";
    offset += nbytes;
  }
  const std::size_t payload_size = detail::align_up(offset, kPayloadAlignment);
  std::vector<std::uint8_t> payload(payload_size, 0);
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    std::uint8_t* dst = payload.data() + offsets[i];
    for (float f : ckpt.tensors[i].data) {
      const std::uint32_t bits = detail::le32(std::bit_cast<std::uint32_t>(f));
      std::memcpy(dst, &bits, 4);
      dst += 4;
    }
  }
  head += "payload " + std::to_string(payload_size) + " " +
          detail::hex32(detail::crc(payload.data(), payload.size())) + "\n";
  head += "manifest_crc32 " +
          detail::hex32(detail::crc(reinterpret_cast<const std::uint8_t*>(head.data()), head.size())) +
          "\n";
  head += "end\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  out.resize(detail::align_up(out.size(), kPayloadAlignment), 0);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  auto fail = [&](const std::string& why) -> IntegrityError {
    return IntegrityError(name + ": " + why);
  };
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto* begin = bytes.data() + pos;
    const auto* nl = static_cast<const std::uint8_t*>(std::memchr(begin, '\n', bytes.size() - pos));
    if (!nl) throw fail("manifest is truncated");
    std::string line(reinterpret_cast<const char*>(begin), reinterpret_cast<const char*>(nl));
    pos = static_cast<std::size_t>(nl - bytes.data()) + 1;
    return line;
  };
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "SSDCKPT ", 8) != 0)
    throw fail("not a checkpoint file");
  const std::string first = next_line();
  const std::string version = first.substr(8);
  if (version != std::to_string(kCheckpointVersion))
    throw VersionError(name + ": checkpoint format version " + version +
                       " is not supported (this build reads version " +
                       std::to_string(kCheckpointVersion) + ")");

  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset, nbytes;
  };
  Checkpoint ckpt;
  std::vector<Entry> entries;
  std::size_t payload_size = 0;
  std::uint32_t payload_crc = 0;
  bool have_payload = false;
  for (;;) {
    const std::size_t line_start = pos;
    const std::string line = next_line();
    if (line.rfind("meta ", 0) == 0) {
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) throw fail("malformed meta line");
      ckpt.meta[line.substr(5, eq - 5)] = line.substr(eq + 1);
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream is(line.substr(7));
      std::string tname, dtype, shape, off, nb;
      if (!(is >> tname >> dtype >> shape >> off >> nb)) throw fail("malformed tensor line");
      if (dtype != "f32") throw fail("unsupported dtype '" + dtype + "'");
      entries.push_back({tname, detail::parse_shape_token(shape),
                         detail::parse_u64(off, "offset"), detail::parse_u64(nb, "byte count")});
    } else if (line.rfind("payload ", 0) == 0) {
      std::istringstream is(line.substr(8));
      std::string sz, c;
      if (!(is >> sz >> c)) throw fail("malformed payload line");
      payload_size = detail::parse_u64(sz, "payload size");
      payload_crc = static_cast<std::uint32_t>(std::stoul(c, nullptr, 16));
      have_payload = true;
    } else if (line.rfind("manifest_crc32 ", 0) == 0) {
      const auto expect = static_cast<std::uint32_t>(std::stoul(line.substr(15), nullptr, 16));
      if (detail::crc(bytes.data(), line_start) != expect) throw fail("manifest checksum mismatch");
    } else if (line == "end") {
      break;
    } else {
      throw fail("unexpected manifest line");
    }
  }
  if (!have_payload) throw fail("manifest has no payload record");
  const std::size_t start = detail::align_up(pos, kPayloadAlignment);
  if (bytes.size() != start + payload_size)
    throw fail("payload length " + std::to_string(bytes.size() < start ? 0 : bytes.size() - start) +
               " does not match manifest (" + std::to_string(payload_size) + ")");
  if (std::any_of(bytes.begin() + std::ptrdiff_t(pos), bytes.begin() + std::ptrdiff_t(start),
                  [](std::uint8_t b) { return b != 0; }))
    throw fail("manifest padding is not zero");
  if (detail::crc(bytes.data() + start, payload_size) != payload_crc)
    throw fail("payload checksum mismatch");
  for (const auto& e : entries) {
    const std::size_t count = shape_size(e.shape);
    if (e.nbytes != count * 4 || e.offset + e.nbytes > payload_size)
      throw fail("tensor '" + e.name + "' extent is inconsistent");
    CheckpointTensor t{e.name, e.shape, std::vector<float>(count)};
    const std::uint8_t* src = bytes.data() + start + e.offset;
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, src + 4 * i, 4);
      t.data[i] = std::bit_cast<float>(detail::le32(bits));
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Run configuration: line-oriented key=value, '#' comments, unknown keys
// rejected.

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string plan_string(const ChannelPlan& p) {
  std::string s;
  for (std::size_t i = 0; i < p.size(); ++i) s += (i ? "," : "") + std::to_string(p[i]);
  return s;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline ChannelPlan parse_plan(const std::string& key, const std::string& v) {
  ChannelPlan p;
  std::size_t pos = 0;
  for (;;) {
    const std::size_t comma = v.find(',', pos);
    p.push_back(parse_count(key, v.substr(pos, comma == std::string::npos ? std::string::npos
                                                                          : comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return p;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> config_fields(const TrainConfig& c) {
  using detail::format_double;
  return {
      {"lr", format_double(c.lr)},
      {"beta1", format_double(c.beta1)},
      {"beta2", format_double(c.beta2)},
      {"adam_eps", format_double(c.adam_eps)},
      {"batch_size", std::to_string(c.batch_size)},
      {"epochs", std::to_string(c.epochs)},
      {"seed", std::to_string(c.seed)},
      {"spectral_norm", c.spectral_norm ? "true" : "false"},
      {"generator_mode", to_string(c.generator_mode)},
      {"data_fraction", std::to_string(c.data_fraction)},
      {"val_noise_count", std::to_string(c.val_noise_count)},
      {"generator_channels", detail::plan_string(c.generator_channels)},
      {"discriminator_channels", detail::plan_string(c.discriminator_channels)},
  };
}

inline std::string render_config(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_fields(c)) out += k + "=" + v + "\n";
  return out;
}

/// Applies one key=value pair to `c`; unknown keys are a ConfigError.
inline void apply_config_field(TrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "lr") c.lr = parse_double(key, v);
  else if (key == "beta1") c.beta1 = parse_double(key, v);
  else if (key == "beta2") c.beta2 = parse_double(key, v);
  else if (key == "adam_eps") c.adam_eps = parse_double(key, v);
  else if (key == "batch_size") c.batch_size = parse_count(key, v);
  else if (key == "epochs") c.epochs = parse_count(key, v);
  else if (key == "seed") c.seed = parse_count(key, v);
  else if (key == "spectral_norm") c.spectral_norm = parse_bool(key, v);
  else if (key == "generator_mode") c.generator_mode = parse_generator_mode(v);
  else if (key == "data_fraction") c.data_fraction = static_cast<int>(parse_count(key, v));
  else if (key == "val_noise_count") c.val_noise_count = parse_count(key, v);
  else if (key == "generator_channels") c.generator_channels = parse_plan(key, v);
  else if (key == "discriminator_channels") c.discriminator_channels = parse_plan(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Parses config text on top of the defaults.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    apply_config_field(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline TrainConfig read_config_file(const std::filesystem::path& path, TrainConfig base = {}) {
  const auto bytes = detail::read_file(path);
  try {
    return parse_config(std::string(bytes.begin(), bytes.end()), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_config_file(const TrainConfig& c, const std::filesystem::path& path) {
  const std::string text = render_config(c);
  write_file_atomic(path, text.data(), text.size());
}

// ---------------------------------------------------------------------------
// Sample grids

inline constexpr std::size_t kGridSeparator = 2;

/// Tiles images [n, 3, S, S] row-major into ceil(n / cols) rows with 2-pixel
/// black separators. Values map from [-1, 1] to round(127.5 (x + 1)).
template <typename T>
Image8 make_sample_grid(const Tensor<T>& images, std::size_t cols) {
  require_rank(images, 4, "sample grid");
  const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (n == 0) throw ArgumentError("sample grid needs at least one image");
  if (cols == 0) throw ArgumentError("sample grid needs at least one column");
  if (images.dim(1) != 3) throw DimensionError("sample grid expects 3-channel images");
  cols = std::min(cols, n);
  const std::size_t rows = (n + cols - 1) / cols;
  Image8 grid(rows * h + (rows - 1) * kGridSeparator, cols * w + (cols - 1) * kGridSeparator);
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t oy = (i / cols) * (h + kGridSeparator);
    const std::size_t ox = (i % cols) * (w + kGridSeparator);
    const T* src = images.data() + i * 3 * hw;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          grid.at(oy + y, ox + x, c) = to_pixel(double(src[c * hw + y * w + x]));
  }
  return grid;
}

template <typename T>
void write_sample_grid(const Tensor<T>& images, std::size_t cols, const std::filesystem::path& path) {
  write_png(path, make_sample_grid(images, cols));
}

// ---------------------------------------------------------------------------
// Loss CSV

inline constexpr const char* kLossCsvHeader =
    "step,epoch,d_loss,g_loss,d_real_prob,d_fake_prob,g_grad_norm";

inline std::string render_loss_csv(const TrainLog& log) {
  std::string out = std::string(kLossCsvHeader) + "\n";
  char buf[256];
  for (const auto& r : log.steps) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.epoch,
                  r.d_loss, r.g_loss, r.d_real_prob, r.d_fake_prob, r.g_grad_norm);
    out += buf;
  }
  return out;
}

inline void write_loss_csv(const TrainLog& log, const std::filesystem::path& path) {
  const std::string text = render_loss_csv(log);
  write_file_atomic(path, text.data(), text.size());
}

/// Parses a loss CSV back into step records.
inline std::vector<StepRecord> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kLossCsvHeader)
    throw IoError(path.string() + ": unexpected loss CSV header");
  std::vector<StepRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepRecord r;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%lf,%lf,%lf", &r.step, &r.epoch, &r.d_loss,
                    &r.g_loss, &r.d_real_prob, &r.d_fake_prob, &r.g_grad_norm) != 7)
      throw IoError(path.string() + ": malformed row '" + line + "'");
    rows.push_back(r);
  }
  return rows;
}

}  // namespace ssd
