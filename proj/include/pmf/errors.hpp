#pragma once

#include <stdexcept>
#include <string>

namespace pmf {

// Base of all library errors. The CLI maps each subclass to its own exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, ratios or schedules.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing files, malformed records, ids out of range.
class DataError : public Error {
 public:
  using Error::Error;
};

// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pmf
