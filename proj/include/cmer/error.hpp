#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cmer {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition or schema. Maps to CLI exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised by inference backends. `retryable` is true for HTTP 429/5xx and
/// transport failures; other 4xx responses are fatal.
class BackendError : public Error {
 public:
  BackendError(std::string message, int status, bool retryable, double retry_after_s = -1.0)
      : Error(std::move(message)), status_(status), retryable_(retryable), retry_after_s_(retry_after_s) {}

  [[nodiscard]] int status() const noexcept { return status_; }
  [[nodiscard]] bool retryable() const noexcept { return retryable_; }
  /// Server-provided Retry-After in seconds, negative when absent.
  [[nodiscard]] double retry_after_s() const noexcept { return retry_after_s_; }

 private:
  int status_;
  bool retryable_;
  double retry_after_s_;
};

/// A stage could not complete; `pending` lists the unfinished items
/// (unscored pairs, unclassified review ids). Maps to CLI exit code 3.
class PipelineError : public Error {
 public:
  PipelineError(std::string message, std::vector<std::string> pending)
      : Error(std::move(message)), pending_(std::move(pending)) {}

  [[nodiscard]] const std::vector<std::string>& pending() const noexcept { return pending_; }

 private:
  std::vector<std::string> pending_;
};

class AuthorizationError : public Error {
 public:
  using Error::Error;
};

class ConflictError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmer
