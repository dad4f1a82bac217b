#pragma once

#include <stdexcept>
#include <string>

namespace clipmap {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes (see run_command).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed user-supplied data (token ids, image batches, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace clipmap
