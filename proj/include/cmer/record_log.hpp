#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace cmer {

/// Thread-safe string-keyed map, optionally persisted as an append-only JSONL
/// log. Each record carries a CRC32 over its key and value; records that fail
/// to parse or verify (including a torn final line) are skipped with a
/// warning when the log is replayed.
class RecordLog {
 public:
  RecordLog() = default;
  explicit RecordLog(const std::filesystem::path& path);

  RecordLog(const RecordLog&) = delete;
  RecordLog& operator=(const RecordLog&) = delete;

  [[nodiscard]] std::optional<nlohmann::json> get(const std::string& key) const;
  /// Inserts and appends; a key already present is left untouched.
  void put(const std::string& key, const nlohmann::json& value);

  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] std::size_t corrupt_records() const noexcept { return corrupt_; }
  [[nodiscard]] bool persistent() const noexcept { return log_.is_open(); }

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, nlohmann::json> entries_;
  std::ofstream log_;
  std::size_t corrupt_ = 0;
};

}  // namespace cmer
