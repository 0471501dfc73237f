#pragma once

#include <stdexcept>
#include <string>

namespace fsts {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// Out-of-range lookups (embedding indices etc).
struct IndexError : Error {
  using Error::Error;
};

// Non-finite values, divergence, failed gradient checks.
struct NumericError : Error {
  using Error::Error;
};

// Problems with input data (CSV parsing, cleaning, windowing).
struct DataError : Error {
  using Error::Error;
};

// Bad configuration (sidecar metadata, config JSON, checkpoint headers).
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace fsts
