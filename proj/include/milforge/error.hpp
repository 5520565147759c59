#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace milforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed MILCSV input. Carries the 1-based line number (0 when the
/// failure is not tied to a line, e.g. an empty file).
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(line == 0 ? what : what + " at line " + std::to_string(line)), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Shape disagreement between operands, parameters, or datasets.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared in a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument or configuration was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace milforge
