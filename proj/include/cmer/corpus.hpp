#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace cmer {

enum class Platform { ios, android, unknown };

/// Ground-truth class of a review: privacy/security-related or not.
enum class Label : int { non_psr = 0, psr = 1 };

std::string_view to_string(Platform p);
std::optional<Platform> parse_platform(std::string_view s);

struct Date {
  int year = 1970;
  int month = 1;
  int day = 1;

  friend auto operator<=>(const Date&, const Date&) = default;
};

/// Strict "YYYY-MM-DD".
std::string to_iso(const Date& d);

/// Accepts YYYY-MM-DD, YYYY/MM/DD, an ISO timestamp (date prefix used),
/// MM/DD/YYYY and DD/MM/YYYY (the latter only when the first field exceeds 12),
/// DD.MM.YYYY, and "Mon DD, YYYY". Returns nullopt for anything else or for
/// calendar-invalid dates.
std::optional<Date> parse_date(std::string_view s);

struct Review {
  std::string id;
  std::string app;
  Platform platform = Platform::unknown;
  int rating = 1;
  Date date;
  std::string text;
  std::optional<Label> label;

  friend bool operator==(const Review&, const Review&) = default;
};

struct LabelCounts {
  std::size_t psr = 0;
  std::size_t non_psr = 0;
  std::size_t unlabeled = 0;
};

/// Immutable, id-sorted collection of reviews.
class Corpus {
 public:
  Corpus() = default;
  /// Sorts by id. Throws ValidationError on duplicate ids.
  Corpus(std::string name, std::vector<Review> reviews, std::string provenance = {});

  [[nodiscard]] const std::string& name() const noexcept { return name_; }
  [[nodiscard]] const std::vector<Review>& reviews() const noexcept { return reviews_; }
  /// SHA-256 of the source file, or of the parent corpus for derived corpora.
  [[nodiscard]] const std::string& provenance() const noexcept { return provenance_; }
  [[nodiscard]] std::size_t size() const noexcept { return reviews_.size(); }
  [[nodiscard]] bool empty() const noexcept { return reviews_.empty(); }
  [[nodiscard]] const Review* find(std::string_view id) const;
  [[nodiscard]] LabelCounts label_counts() const;

 private:
  std::string name_;
  std::vector<Review> reviews_;
  std::string provenance_;
};

enum class Format { jsonl, csv };
Format parse_format(std::string_view s);

struct RecordError {
  std::size_t row = 0;  // 1-based data row
  std::string message;
};

struct IngestResult {
  Corpus corpus;
  std::vector<RecordError> errors;
};

/// Reads a corpus file. Invalid records are reported in `errors` and skipped;
/// a duplicate id aborts with ValidationError naming both rows; an unreadable
/// file raises IoError.
IngestResult ingest(const std::filesystem::path& path, Format format);
IngestResult ingest_text(std::string_view contents, Format format, std::string name = "corpus");

/// Lowercases, strips emoji and characters outside letters, digits and
/// . , ! ? ' " $ %, and collapses whitespace runs.
std::string normalize_text(std::string_view text);

struct PreprocessResult {
  Review review;
  bool quarantined = false;  // text empty after normalization
};

PreprocessResult preprocess(const Review& review);

struct PreprocessedCorpus {
  Corpus corpus;
  std::vector<Review> quarantined;  // original (unnormalized) records
};

PreprocessedCorpus preprocess_corpus(const Corpus& corpus);

/// Reviews with rating <= max_rating, order preserved. Requires 1 <= max_rating <= 5.
Corpus filter_by_rating(const Corpus& corpus, int max_rating);

nlohmann::ordered_json to_json(const Review& review);
/// Throws ValidationError describing the first schema violation.
Review review_from_json(const nlohmann::json& j);

/// Canonical JSONL: one review per line, fixed key order, trailing newline.
std::string to_jsonl(const Corpus& corpus);
std::string to_jsonl(const std::vector<Review>& reviews);
void export_jsonl(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace cmer
