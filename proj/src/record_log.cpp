#include "cmer/record_log.hpp"

#include <cstdio>
#include <iostream>

#include "cmer/error.hpp"
#include "cmer/util.hpp"

namespace cmer {

namespace {

std::string checksum(const std::string& key, const nlohmann::json& value) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc32(key + "\t" + value.dump()));
  return buf;
}

}  // namespace

RecordLog::RecordLog(const std::filesystem::path& path) {
  if (std::filesystem::exists(path)) {
    std::size_t line_no = 0;
    for (const auto& line : split_lines(read_file(path))) {
      ++line_no;
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line, nullptr, false);
      const bool ok = j.is_object() && j.contains("k") && j.contains("v") && j.contains("crc") &&
                      j["k"].is_string() && j["crc"].is_string() &&
                      checksum(j["k"].get<std::string>(), j["v"]) == j["crc"].get<std::string>();
      if (!ok) {
        ++corrupt_;
        std::clog << "warning: skipping corrupt record at " << path.string() << ":" << line_no << "\n";
        continue;
      }
      entries_.emplace(j["k"].get<std::string>(), std::move(j["v"]));
    }
  } else if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  log_.open(path, std::ios::app | std::ios::binary);
  if (!log_) throw IoError("cannot open record log '" + path.string() + "'");
}

std::optional<nlohmann::json> RecordLog::get(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return std::optional<nlohmann::json>(std::in_place, it->second);
}

void RecordLog::put(const std::string& key, const nlohmann::json& value) {
  std::lock_guard lock(mu_);
  if (!entries_.emplace(key, value).second) return;
  if (!log_.is_open()) return;
  nlohmann::ordered_json rec;
  rec["k"] = key;
  rec["v"] = value;
  rec["crc"] = checksum(key, value);
  // One write per record so a crash can only tear the final line.
  const auto line = rec.dump() + "\n";
  log_.write(line.data(), static_cast<std::streamsize>(line.size()));
  log_.flush();
}

std::size_t RecordLog::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

}  // namespace cmer
