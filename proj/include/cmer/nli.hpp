#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmer/corpus.hpp"
#include "cmer/hypotheses.hpp"
#include "cmer/record_log.hpp"
#include "cmer/retry.hpp"

namespace cmer {

/// Probabilities of the three NLI labels for one (premise, hypothesis) pair.
struct EntailmentScore {
  double entailment = 0.0;
  double neutral = 0.0;
  double contradiction = 0.0;

  friend bool operator==(const EntailmentScore&, const EntailmentScore&) = default;
};

inline constexpr double kScoreSumTolerance = 1e-3;

/// Reason the score is malformed (component outside [0,1] or the sum farther
/// than kScoreSumTolerance from 1), or nullopt when valid.
std::optional<std::string> score_violation(const EntailmentScore& s);

nlohmann::json to_json(const EntailmentScore& s);
EntailmentScore score_from_json(const nlohmann::json& j);

struct NliPair {
  std::string premise;
  std::string hypothesis_id;
  std::string hypothesis_text;
};

/// Entailment backend. Implementations must be safe to call concurrently.
class NliBackend {
 public:
  virtual ~NliBackend() = default;
  [[nodiscard]] virtual std::string model_id() const = 0;
  /// One score per pair, positionally. Throws BackendError.
  virtual std::vector<EntailmentScore> score(std::span<const NliPair> pairs) = 0;
};

struct MockNliRule {
  std::string keyword;        // case-insensitive substring of the premise
  std::string hypothesis_id;  // "*" matches every hypothesis
  EntailmentScore score;
};

struct MockNliRules {
  std::string model_id = "mock-nli";
  EntailmentScore default_score{0.05, 0.90, 0.05};
  std::vector<MockNliRule> rules;  // first match wins
};

MockNliRules mock_nli_rules_from_json(const nlohmann::json& j);
MockNliRules load_mock_nli_rules(const std::filesystem::path& path);

/// Deterministic keyword-table backend; a pure function of (premise, hypothesis id).
class MockNliBackend final : public NliBackend {
 public:
  explicit MockNliBackend(MockNliRules rules);

  [[nodiscard]] std::string model_id() const override { return rules_.model_id; }
  std::vector<EntailmentScore> score(std::span<const NliPair> pairs) override;
  [[nodiscard]] EntailmentScore lookup(std::string_view premise, std::string_view hypothesis_id) const;

  [[nodiscard]] std::size_t calls() const noexcept { return calls_.load(); }

 private:
  MockNliRules rules_;
  std::vector<std::string> lowered_keywords_;
  std::atomic<std::size_t> calls_{0};
};

std::unique_ptr<MockNliBackend> mock_backend(MockNliRules rules);

/// Client for POST {base_url}/v1/entailment.
class HttpNliBackend final : public NliBackend {
 public:
  HttpNliBackend(std::string base_url, std::string model, std::chrono::milliseconds timeout = std::chrono::seconds(30));

  [[nodiscard]] std::string model_id() const override { return model_; }
  std::vector<EntailmentScore> score(std::span<const NliPair> pairs) override;

 private:
  std::string base_url_;
  std::string model_;
  std::chrono::milliseconds timeout_;
};

struct EntailmentMatrix {
  struct Row {
    std::vector<EntailmentScore> scores;  // one per hypothesis_ids entry
    bool truncated = false;               // premise cut at the character budget

    friend bool operator==(const Row&, const Row&) = default;
  };

  std::string model_id;
  std::string set_id;
  std::vector<std::string> hypothesis_ids;
  std::map<std::string, Row> rows;  // by review id

  friend bool operator==(const EntailmentMatrix&, const EntailmentMatrix&) = default;
};

/// Header line with provenance and column ids, then one line per review id.
std::string to_jsonl(const EntailmentMatrix& m);
EntailmentMatrix matrix_from_jsonl(std::string_view text);
EntailmentMatrix load_matrix(const std::filesystem::path& path);

/// Throws ValidationError unless every column resolves to exactly one
/// hypothesis of `set` and every row has one score per column.
void check_matrix(const EntailmentMatrix& m, const HypothesisSet& set);

/// Score cache keyed by (model id, hash(premise), hash(hypothesis text)),
/// optionally persisted as a checksummed append-only log.
class ScoreCache {
 public:
  ScoreCache() = default;
  explicit ScoreCache(const std::filesystem::path& log_path) : log_(log_path) {}

  static std::string key(std::string_view model_id, std::string_view premise, std::string_view hypothesis_text);

  [[nodiscard]] std::optional<EntailmentScore> get(const std::string& key) const;
  void put(const std::string& key, const EntailmentScore& score);

  [[nodiscard]] std::size_t size() const { return log_.size(); }
  [[nodiscard]] std::size_t corrupt_records() const noexcept { return log_.corrupt_records(); }

 private:
  RecordLog log_;
};

struct ScoreOptions {
  std::size_t batch_size = 16;
  std::size_t max_in_flight = 8;
  std::size_t premise_char_budget = 2000;  // code points
  RetryPolicy retry;
  Sleeper sleeper = real_sleeper();
};

struct ScoreStats {
  std::size_t pairs = 0;
  std::size_t cache_hits = 0;
  std::size_t backend_calls = 0;  // score() invocations, retries included
  std::size_t truncated_premises = 0;
};

struct ScoreOutcome {
  EntailmentMatrix matrix;
  ScoreStats stats;
};

/// Scores every (review, hypothesis) pair, consulting `cache` first. The
/// result is independent of batch size and completion order. Batches that
/// exhaust their retries are reported together as a PipelineError listing
/// the unscored "review/hypothesis" pairs; malformed scores and fatal
/// backend errors abort immediately.
ScoreOutcome score_corpus(const Corpus& corpus, const HypothesisSet& set, NliBackend& backend,
                          const ScoreOptions& options = {}, ScoreCache* cache = nullptr);

}  // namespace cmer
