#pragma once

#include <stdexcept>
#include <string>

namespace crna {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/operation shape disagreement. Message names the offending node.
struct ShapeError : Error {
  using Error::Error;
};

// Non-finite value produced by an operation, or invalid numeric input.
struct NumericError : Error {
  using Error::Error;
};

// API called out of order (e.g. backward before forward).
struct StateError : Error {
  using Error::Error;
};

// Bad configuration or precondition on user-supplied parameters.
struct ConfigError : Error {
  using Error::Error;
};

// File parsing / serialization failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace crna
