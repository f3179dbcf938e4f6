#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cmer {

inline constexpr std::string_view kToolVersion = "0.1.0";

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

std::uint32_t crc32(std::string_view data);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::vector<std::string> split_lines(std::string_view text);

std::string trim(std::string_view s);

std::string ascii_lower(std::string_view s);

/// Current UTC time as "YYYY-MM-DDTHH:MM:SSZ".
std::string utc_timestamp();

/// Number of UTF-8 code points in `s`; malformed bytes count as one each.
std::size_t utf8_length(std::string_view s);

/// Longest prefix of `s` holding at most `max_code_points` code points.
std::string_view utf8_prefix(std::string_view s, std::size_t max_code_points);

/// Joins at most `limit` items with ", ", appending "... (+N more)" when truncated.
std::string join_limited(const std::vector<std::string>& items, std::size_t limit = 20);

}  // namespace cmer
