#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmer/nli.hpp"

namespace cmer {

enum class PseudoLabel { maybe_psr, maybe_not_psr };

std::string_view to_string(PseudoLabel l);
PseudoLabel parse_pseudo_label(std::string_view s);

/// "At least `min_count` hypotheses score above `threshold`."
struct HeuristicClause {
  double threshold = 0.5;  // in (0, 1)
  int min_count = 1;       // >= 1

  friend bool operator==(const HeuristicClause&, const HeuristicClause&) = default;
};

enum class Comparison {
  strict,     // entailment > threshold
  inclusive,  // entailment >= threshold
};

/// Disjunction of clauses: a row is maybe-psr if any clause fires.
struct HeuristicRuleSet {
  std::string name;
  std::vector<HeuristicClause> clauses;
  Comparison comparison = Comparison::strict;

  /// Throws ValidationError for an empty clause list, a threshold outside
  /// (0,1) or a min_count below 1.
  void validate() const;

  friend bool operator==(const HeuristicRuleSet&, const HeuristicRuleSet&) = default;
};

/// {(0.85, 1), (0.75, 3), (0.70, 5)}, strict comparison.
const HeuristicRuleSet& default_rules();

nlohmann::ordered_json to_json(const HeuristicRuleSet& rules);
HeuristicRuleSet rules_from_json(const nlohmann::json& j);
/// "default" selects default_rules(); anything else is read as a rule file.
HeuristicRuleSet load_rules(std::string_view path_or_default);

/// Number of hypotheses in `row` whose entailment exceeds `threshold`
/// (or reaches it, under Comparison::inclusive).
std::size_t count_above(std::span<const EntailmentScore> row, double threshold,
                        Comparison comparison = Comparison::strict);

struct PseudoRecord {
  PseudoLabel label = PseudoLabel::maybe_not_psr;
  std::vector<std::size_t> counts;  // count_above per clause, clause order
  // Optional payload carried to the LLM stage and evaluation.
  std::string text;
  std::optional<Label> truth;

  friend bool operator==(const PseudoRecord&, const PseudoRecord&) = default;
};

struct PseudoLabeledCorpus {
  std::string model_id;
  std::string set_id;
  std::string rules_name;
  std::map<std::string, PseudoRecord> records;  // by review id

  [[nodiscard]] std::size_t count(PseudoLabel l) const;
  /// Only the maybe-psr records.
  [[nodiscard]] PseudoLabeledCorpus positives() const;

  friend bool operator==(const PseudoLabeledCorpus&, const PseudoLabeledCorpus&) = default;
};

PseudoLabel label_row(std::span<const EntailmentScore> row, const HeuristicRuleSet& rules,
                      std::vector<std::size_t>* counts = nullptr);

PseudoLabeledCorpus apply_heuristics(const EntailmentMatrix& matrix, const HeuristicRuleSet& rules);

/// Copies review text and ground-truth labels from `corpus` into matching records.
void attach_reviews(PseudoLabeledCorpus& pseudo, const Corpus& corpus);

std::string to_jsonl(const PseudoLabeledCorpus& p);
PseudoLabeledCorpus pseudo_from_jsonl(std::string_view text);
PseudoLabeledCorpus load_pseudo(const std::filesystem::path& path);

}  // namespace cmer
