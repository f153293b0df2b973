#pragma once

#include <stdexcept>
#include <string>

namespace lswap {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents that do not agree with what an operation or layer expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on a scalar argument (kernel extent, sigma, token index...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, or a run that missed a numeric tolerance.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration keys/values, missing or malformed input files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace lswap
