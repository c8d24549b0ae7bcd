#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mfvi {

// Exception contract:
// - DomainError: invalid argument, shape or range (programmer or input error).
// - ConfigError: a user-facing configuration field is missing or invalid.
// - DataFormatError: malformed input file; carries the 1-based line number.
// - NumericError: non-finite quantity produced during a fit.
// - ConsistencyError: the ELBO decreased under coordinate ascent.
// - LinalgError: a factorization that must succeed did not.

class DomainError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
public:
  ConfigError(std::string field, const std::string &message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  [[nodiscard]] const std::string &field() const noexcept { return field_; }

private:
  std::string field_;
};

class DataFormatError : public std::runtime_error {
public:
  DataFormatError(std::size_t line, const std::string &message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message),
        line_(line) {}

  [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

class NumericError : public std::runtime_error {
public:
  NumericError(std::size_t iteration, const std::string &message)
      : std::runtime_error("iteration " + std::to_string(iteration) + ": " +
                           message),
        iteration_(iteration), message_(message) {}

  [[nodiscard]] std::size_t iteration() const noexcept { return iteration_; }
  [[nodiscard]] const std::string &message() const noexcept { return message_; }

private:
  std::size_t iteration_;
  std::string message_;
};

class ConsistencyError : public NumericError {
public:
  using NumericError::NumericError;
};

class LinalgError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace mfvi
