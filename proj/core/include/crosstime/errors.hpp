#pragma once

#include <stdexcept>
#include <string>

namespace crosstime {

/// Shape or dimension disagreement between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Numeric failure at runtime (division by zero element, NaN input, ...).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (schema violations are collected
/// into a single message, one problem per line).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File I/O or parse failure; the message names the file and position.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace crosstime
