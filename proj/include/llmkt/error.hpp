#pragma once

#include <stdexcept>
#include <string>

namespace llmkt {

// Base of everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input or configuration detected before any work is done. The CLI maps
// this to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Failure while executing (client errors, non-finite losses, I/O).
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace llmkt
