#pragma once

#include <stdexcept>
#include <string>

namespace catagg {

// Every failure raised by the library derives from Error so callers can catch
// broadly; the CLI maps the concrete kinds onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes, extents or channel counts that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (empty lists, out-of-range points, dtype mismatch).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong mode, e.g. backward() under inference.
class StateError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Inconsistent model / run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or incompatible files.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace catagg
