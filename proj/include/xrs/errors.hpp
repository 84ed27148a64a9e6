#pragma once

#include <stdexcept>
#include <string>

namespace xrs {

// Base of every error raised by the library. `kind()` is a stable
// machine-parseable tag used by the CLI for its single-line cause.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// Contract violation by the caller (bad arguments, malformed config).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& message) : Error("usage", message) {}
};

// An enumeration or exact computation would exceed a configured bound.
class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& message)
      : Error("capacity", message) {}
};

// A mathematical quantity is undefined for the given inputs.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& message)
      : Error("domain", message) {}
};

// Non-finite values or a failed linear solve during a computation.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message)
      : Error("numeric", message) {}
};

// Kernel matrix could not be made positive definite or inputs are degenerate.
class ConditioningError : public Error {
 public:
  explicit ConditioningError(const std::string& message)
      : Error("conditioning", message) {}
};

// Malformed external record file.
class IngestionError : public Error {
 public:
  explicit IngestionError(const std::string& message)
      : Error("ingestion", message) {}
};

class UnsupportedMethodError : public Error {
 public:
  explicit UnsupportedMethodError(const std::string& message)
      : Error("unsupported-method", message) {}
};

class PersistenceError : public Error {
 public:
  explicit PersistenceError(const std::string& message)
      : Error("persistence", message) {}
};

}  // namespace xrs
