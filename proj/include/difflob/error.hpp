#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace difflob {

/// Base class for every failure raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments (exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unusable input data (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A malformed input row. Carries the 1-based row number.
class ParseError : public DataError {
 public:
  ParseError(std::size_t row, const std::string& what)
      : DataError(row == 0 ? what : "row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Non-finite values or divergence during optimization (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace difflob
