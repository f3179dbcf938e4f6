#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmer/corpus.hpp"
#include "cmer/evaluation.hpp"
#include "cmer/heuristics.hpp"
#include "cmer/hypotheses.hpp"
#include "cmer/llm.hpp"
#include "cmer/nli.hpp"

namespace cmer {

/// Mirrors the TOML config:
///
///   seed = 0
///   output_dir = "out"
///   [corpus]      path, format = "jsonl"|"csv", max_rating (optional)
///   [hypotheses]  set = "finance-domain" | path
///   [heuristics]  rules = "default" | path
///   [nli]         url, model, batch_size, max_in_flight, premise_char_budget
///   [llm]         url, model, k, temperature, template = "default" | path, max_in_flight
///
/// Relative paths resolve against the config file's directory.
struct PipelineConfig {
  std::filesystem::path corpus_path;
  Format corpus_format = Format::jsonl;
  std::optional<int> max_rating;
  std::string hypothesis_set = "finance-domain";
  std::string rules = "default";

  std::string nli_url;
  std::string nli_model;
  std::size_t nli_batch_size = 16;
  std::size_t nli_max_in_flight = 8;
  std::size_t premise_char_budget = 2000;

  std::string llm_url;
  std::string llm_model;
  int k = 5;
  double temperature = 0.0;
  std::string prompt_template = "default";
  std::size_t llm_max_in_flight = 4;

  std::filesystem::path output_dir = "out";
  std::uint32_t seed = 0;

  /// Throws ValidationError for missing referenced files, an even or
  /// non-positive k, a negative temperature or zero sizes.
  void validate() const;
};

PipelineConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);

/// Fields that affect results; output directory and concurrency bounds are
/// excluded.
nlohmann::ordered_json semantic_fields(const PipelineConfig& c);
std::string config_digest(const PipelineConfig& c);

struct MineOptions {
  Sleeper sleeper = real_sleeper();
  bool use_cache = true;
};

struct MineResult {
  PseudoLabeledCorpus pseudo;
  ClassifiedCorpus classified;
  nlohmann::ordered_json manifest;
};

/// ingest -> [filter_by_rating] -> preprocess -> score -> heuristics ->
/// classify (maybe-psr only). Every stage writes its artifact to the output
/// directory, which is held exclusively through a lock file. On failure the
/// manifest records the completed stages and the error is rethrown.
MineResult mine(const PipelineConfig& config, NliBackend& nli, ChatBackend& chat, const MineOptions& options = {});

/// The manifest without its "timestamps" member.
nlohmann::ordered_json strip_timestamps(nlohmann::ordered_json manifest);

struct NamedNli {
  std::string name;
  NliBackend* backend;
};

struct NliEvaluation {
  ComparisonReport report;        // one run per (model, set), named "model/set"
  PseudoLabeledCorpus best_pseudo;
  std::vector<PseudoLabeledCorpus> pseudo;  // report order
};

/// Scores the labeled corpus with every model against every set, applies
/// that set's rules (default rules when absent from `rules`), and compares
/// the pseudo-labels with the ground truth, maybe-psr as positive.
NliEvaluation evaluate_nli(const Corpus& labeled, const std::vector<NamedNli>& models,
                           const std::vector<HypothesisSet>& sets,
                           const std::map<std::string, HeuristicRuleSet>& rules, const ScoreOptions& options = {});

struct NamedChat {
  std::string name;
  ChatBackend* backend;
};

struct LlmEvaluation {
  ComparisonReport report;
  std::vector<ClassifiedCorpus> classified;  // report order
};

/// Classifies the maybe-psr records of `pseudo` (each must carry a truth
/// label) with every backend and compares verdicts with the truth, yes as
/// positive. Failed classifications are left out of the counts.
LlmEvaluation evaluate_llm(const PseudoLabeledCorpus& pseudo, const std::vector<NamedChat>& backends,
                           const PromptTemplate& tmpl, const ClassifyOptions& options = {});

}  // namespace cmer
