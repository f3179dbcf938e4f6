#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <thread>

#include "cmer/error.hpp"

namespace cmer {

/// Exponential backoff for retryable BackendErrors.
struct RetryPolicy {
  int max_attempts = 5;  // including the first attempt
  std::chrono::milliseconds initial_delay{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_delay{30'000};

  /// Delay after the `failed_attempt`-th failure (1-based).
  [[nodiscard]] std::chrono::milliseconds delay_for(int failed_attempt) const {
    const double ms = static_cast<double>(initial_delay.count()) * std::pow(multiplier, failed_attempt - 1);
    return std::min(max_delay, std::chrono::milliseconds(static_cast<long long>(ms)));
  }
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

/// Invokes `fn` until it succeeds, throws a non-retryable error, or the
/// attempt budget is spent (the last error is rethrown). A server
/// Retry-After hint replaces the computed delay, capped at `max_delay`.
template <class Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn, const Sleeper& sleep) -> decltype(fn()) {
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const BackendError& e) {
      if (!e.retryable() || attempt >= policy.max_attempts) throw;
      auto delay = policy.delay_for(attempt);
      if (e.retry_after_s() >= 0) {
        delay = std::min(policy.max_delay,
                         std::chrono::milliseconds(static_cast<long long>(e.retry_after_s() * 1000.0)));
      }
      if (sleep) sleep(delay);
    }
  }
}

}  // namespace cmer
