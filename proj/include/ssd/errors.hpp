#pragma once

#include <stdexcept>
#include <string>

namespace ssd {

enum class ErrorKind {
  dimension,
  argument,
  config,
  io,
  integrity,
  version,
  numeric,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::argument: return "argument error";
    case ErrorKind::config: return "config error";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::integrity: return "integrity error";
    case ErrorKind::version: return "version error";
    case ErrorKind::numeric: return "numeric error";
  }
  return "error";
}

/// Base of every error raised by the library. The kind drives the CLI's
/// exit code and message prefix.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorKind::dimension, w) {}
};
struct ArgumentError : Error {
  explicit ArgumentError(const std::string& w) : Error(ErrorKind::argument, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::io, w) {}
};
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& w) : Error(ErrorKind::integrity, w) {}
};
struct VersionError : Error {
  explicit VersionError(const std::string& w) : Error(ErrorKind::version, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::numeric, w) {}
};

}  // namespace ssd
