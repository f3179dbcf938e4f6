#include "cmer/http.hpp"

#include <httplib.h>

#include <charconv>

#include "cmer/error.hpp"

namespace cmer {

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path component without trailing slash
};

SplitUrl split_url(std::string_view url) {
  const auto scheme_end = url.find("://");
  const auto host_start = scheme_end == std::string_view::npos ? 0 : scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  SplitUrl out;
  if (path_start == std::string_view::npos) {
    out.origin = std::string(url);
  } else {
    out.origin = std::string(url.substr(0, path_start));
    out.prefix = std::string(url.substr(path_start));
    while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  }
  return out;
}

double parse_retry_after(const httplib::Result& res) {
  if (!res->has_header("Retry-After")) return -1.0;
  const auto value = res->get_header_value("Retry-After");
  double seconds = -1.0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), seconds);
  if (ec != std::errc{} || seconds < 0) return -1.0;
  return seconds;
}

}  // namespace

nlohmann::json post_json(std::string_view base_url, std::string_view path, const nlohmann::json& body,
                         const std::map<std::string, std::string>& headers, std::chrono::milliseconds timeout) {
  const auto url = split_url(base_url);
  const std::string target = url.prefix + std::string(path);

  httplib::Client client(url.origin);
  if (!client.is_valid()) throw BackendError("invalid backend URL '" + std::string(base_url) + "'", 0, false);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  httplib::Headers h;
  for (const auto& [k, v] : headers) h.emplace(k, v);
  auto res = client.Post(target, h, body.dump(), "application/json");
  if (!res) {
    throw BackendError("request to " + std::string(base_url) + target + " failed: " + httplib::to_string(res.error()),
                       0, true);
  }
  const int status = res->status;
  if (status == 429 || status >= 500) {
    throw BackendError("backend returned HTTP " + std::to_string(status), status, true, parse_retry_after(res));
  }
  if (status < 200 || status >= 300) {
    throw BackendError("backend returned HTTP " + std::to_string(status) + ": " + res->body.substr(0, 200), status,
                       false);
  }
  auto parsed = nlohmann::json::parse(res->body, nullptr, false);
  if (parsed.is_discarded()) throw BackendError("backend response is not valid JSON", status, false);
  return parsed;
}

}  // namespace cmer
