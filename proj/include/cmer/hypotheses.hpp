#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace cmer {

struct Hypothesis {
  std::string id;        // stable key, e.g. "D07"
  std::string text;      // single declarative sentence
  std::string category;  // risk category

  friend bool operator==(const Hypothesis&, const Hypothesis&) = default;
};

class HypothesisSet {
 public:
  HypothesisSet() = default;
  /// Validates ids (non-empty, unique), texts (non-empty, single sentence)
  /// and size (>= 1). Throws ValidationError naming the offending entry.
  HypothesisSet(std::string set_id, std::string description, std::vector<Hypothesis> hypotheses);

  [[nodiscard]] const std::string& set_id() const noexcept { return set_id_; }
  [[nodiscard]] const std::string& description() const noexcept { return description_; }
  [[nodiscard]] const std::vector<Hypothesis>& hypotheses() const noexcept { return hypotheses_; }
  [[nodiscard]] std::size_t size() const noexcept { return hypotheses_.size(); }

  [[nodiscard]] const Hypothesis* find(std::string_view id) const;
  /// Index of `id` in declaration order; throws NotFoundError.
  [[nodiscard]] std::size_t index_of(std::string_view id) const;
  [[nodiscard]] std::vector<Hypothesis> in_category(std::string_view category) const;
  /// Distinct categories in first-appearance order.
  [[nodiscard]] std::vector<std::string> categories() const;

  friend bool operator==(const HypothesisSet&, const HypothesisSet&) = default;

 private:
  std::string set_id_;
  std::string description_;
  std::vector<Hypothesis> hypotheses_;
};

inline constexpr std::string_view kFinanceSetId = "finance-domain";

/// The 17 finance-domain privacy and security hypotheses, D01..D17, grouped
/// into Input Harvest, Sensitive Data Storage, Sensitive Data Transmission
/// and Communication Infrastructure.
const HypothesisSet& builtin_finance_set();

nlohmann::ordered_json to_json(const HypothesisSet& set);
HypothesisSet hypothesis_set_from_json(const nlohmann::json& j);
HypothesisSet load_set(const std::filesystem::path& path);

/// Resolves a built-in set id, or otherwise treats `id_or_path` as a set file.
HypothesisSet resolve_set(std::string_view id_or_path);

}  // namespace cmer
