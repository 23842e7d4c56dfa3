#pragma once

#include <stdexcept>

namespace opn {

/// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mismatched or invalid tensor/weight shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// Out-of-bounds element access.
struct IndexError : Error {
  using Error::Error;
};

/// NaN/Inf encountered where a finite value is required.
struct NumericError : Error {
  using Error::Error;
};

/// Malformed serialized input (bad magic, truncation, count mismatch).
struct FormatError : Error {
  using Error::Error;
};

/// Well-formed container holding invalid payload values.
struct DataError : Error {
  using Error::Error;
};

/// Invalid configuration value.
struct ConfigError : Error {
  using Error::Error;
};

/// Training produced a non-finite loss; the run must be aborted.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace opn
