#pragma once

#include <stdexcept>
#include <string>

namespace cte {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not agree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (fully masked softmax row,
/// backward on a non-scalar, mismatched EMA shapes, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad input data: too-short waveform, empty slice, T = 0, ...
class InputError : public Error {
 public:
  using Error::Error;
};

/// Sequence longer than the positional table supports.
class LengthError : public InputError {
 public:
  using InputError::InputError;
};

/// Inconsistent or invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed text or binary file. Carries the location in the message.
class ParseError : public Error {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : Error(where + ":" + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_ = 0;
};

/// A referenced key (utterance id, parameter name) is missing.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Near-zero norm or a similarly ill-posed numerical input.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered during training or a forward pass.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A function expected to be deterministic returned different values.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

}  // namespace cte
