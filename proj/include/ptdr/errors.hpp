#pragma once

#include <stdexcept>
#include <string>

namespace ptdr {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or axis violation between operands.
struct DimensionError : Error {
  using Error::Error;
};

/// Invalid configuration value (schedule range, non-exact conv output, ...).
struct ConfigError : Error {
  using Error::Error;
};

/// Violated call contract (non-scalar loss, class index overflow, ...).
struct ContractError : Error {
  using Error::Error;
};

/// Out-of-range index, e.g. a timestep outside [1, T].
struct IndexError : Error {
  using Error::Error;
};

/// Model head mode does not match the requested operation.
struct ModeError : Error {
  using Error::Error;
};

/// Malformed file content (checkpoint, PGM, manifest).
struct FormatError : Error {
  using Error::Error;
};

/// Non-finite value detected in checked mode.
struct NumericError : Error {
  using Error::Error;
};

/// Metric is undefined for the given inputs (e.g. empty confusion matrix).
struct MetricError : Error {
  using Error::Error;
};

/// Backward was requested on a tensor with no recorded gradient path.
struct GradientError : Error {
  using Error::Error;
};

}  // namespace ptdr
