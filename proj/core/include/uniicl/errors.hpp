#pragma once

#include <stdexcept>
#include <string>

namespace uniicl {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated pre-condition or API contract (wrong arity, empty input, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not compose.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Sequence longer than the backbone window.
class LengthError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Token id or target outside its valid range.
class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Invalid configuration value; the message names the offending field.
class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Filesystem failure or malformed on-disk artifact.
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace uniicl
