#pragma once

#include <stdexcept>
#include <string>

namespace hgd {

// Exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kValidation = 3,
  kRuntime = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const { return ExitCode::kRuntime; }
};

/// Bad command-line usage or an unknown option value.
class UsageError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kUsage; }
};

/// Inputs that violate a documented contract (shapes, ranges, layouts).
class ValidationError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kValidation; }
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ArgumentError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A file could not be read or parsed.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Raised by the trainer when a loss term becomes NaN or infinite. The
/// message carries the full term breakdown of the offending step.
class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

}  // namespace hgd
