#pragma once

#include <chrono>
#include <map>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace cmer {

/// POSTs `body` as JSON to `base_url + path` and returns the parsed response.
/// HTTP 429 and 5xx, and transport failures, raise a retryable BackendError
/// (carrying any Retry-After seconds); other non-2xx statuses and
/// unparseable bodies raise a fatal one.
nlohmann::json post_json(std::string_view base_url, std::string_view path, const nlohmann::json& body,
                         const std::map<std::string, std::string>& headers, std::chrono::milliseconds timeout);

}  // namespace cmer
