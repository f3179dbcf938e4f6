#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmer/corpus.hpp"

namespace cmer {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  [[nodiscard]] std::size_t total() const noexcept { return tp + tn + fp + fn; }

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Counts predictions against truth. A prediction equal to `positive_token`
/// is positive, any other token negative; psr truth is positive.
/// Throws ValidationError listing predicted ids that have no truth label.
ConfusionCounts confusion(const std::map<std::string, std::string>& predictions,
                          const std::map<std::string, Label>& truth, std::string_view positive_token);

/// Undefined values stay nullopt and render as "n/a".
struct Metrics {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

Metrics metrics(const ConfusionCounts& c);

/// Two decimals, or "n/a".
std::string format_metric(const std::optional<double>& v, int decimals = 2);

struct AgreementStats {
  double p_o = 0.0;
  double p_e = 0.0;
  double kappa = 0.0;
};

/// Unweighted Cohen's kappa over two binary label sequences (values 0/1).
/// Throws ValidationError on a length mismatch, an empty input or a value
/// outside {0, 1}.
AgreementStats cohens_kappa(std::span<const int> a, std::span<const int> b);

/// Reads a label sequence: a JSON array of 0/1, or text with one 0/1 per line.
std::vector<int> load_label_list(const std::filesystem::path& path);

struct RunResult {
  std::string name;
  ConfusionCounts counts;
  Metrics metrics;
  bool best = false;
};

struct ComparisonReport {
  std::vector<RunResult> runs;  // input order
  std::size_t best_index = 0;

  [[nodiscard]] const RunResult& best() const { return runs.at(best_index); }
};

/// Flags the run with the highest F1 (undefined ranks below any value),
/// breaking ties by higher recall, then lexicographically smaller name.
/// Throws ValidationError when `runs` is empty.
ComparisonReport compare_report(const std::vector<std::pair<std::string, ConfusionCounts>>& runs);

nlohmann::ordered_json to_json(const ComparisonReport& r);
std::string to_markdown(const ComparisonReport& r);

}  // namespace cmer
