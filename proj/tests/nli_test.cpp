#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <set>

#include "cmer/error.hpp"
#include "cmer/nli.hpp"
#include "cmer/util.hpp"
#include "support.hpp"

namespace cmer {
namespace {

Corpus small_corpus(std::size_t n) {
  std::vector<Review> reviews;
  const char* texts[] = {"my account was hacked", "the app is slow", "they stole money", "asks for every permission"};
  for (std::size_t i = 0; i < n; ++i) {
    char id[8];
    std::snprintf(id, sizeof id, "r%03zu", i);
    reviews.push_back({id, "a", Platform::ios, 1, {2024, 1, 1}, texts[i % 4], std::nullopt});
  }
  return Corpus("c", std::move(reviews));
}

MockNliRules fixture_rules() { return load_mock_nli_rules(testing::source_path("fixtures/mine/mock/nli.json")); }

ScoreOptions quiet(std::size_t batch = 4, std::size_t in_flight = 1) {
  ScoreOptions o;
  o.batch_size = batch;
  o.max_in_flight = in_flight;
  o.sleeper = [](std::chrono::milliseconds) {};
  return o;
}

// Scores one fixed pair per call; every call fails with the configured error.
class FailingBackend final : public NliBackend {
 public:
  FailingBackend(int status, bool retryable) : status_(status), retryable_(retryable) {}
  std::string model_id() const override { return "failing"; }
  std::vector<EntailmentScore> score(std::span<const NliPair>) override {
    ++calls;
    throw BackendError("boom", status_, retryable_);
  }
  std::atomic<int> calls{0};

 private:
  int status_;
  bool retryable_;
};

// Returns a fixed score for every pair.
class ConstantBackend final : public NliBackend {
 public:
  explicit ConstantBackend(EntailmentScore s) : s_(s) {}
  std::string model_id() const override { return "constant"; }
  std::vector<EntailmentScore> score(std::span<const NliPair> pairs) override {
    return std::vector<EntailmentScore>(pairs.size(), s_);
  }

 private:
  EntailmentScore s_;
};

// Fails retryably for batches containing a given premise.
class PartialBackend final : public NliBackend {
 public:
  std::string model_id() const override { return "partial"; }
  std::vector<EntailmentScore> score(std::span<const NliPair> pairs) override {
    for (const auto& p : pairs) {
      if (p.premise.find("slow") != std::string::npos) throw BackendError("503", 503, true);
    }
    return std::vector<EntailmentScore>(pairs.size(), {0.1, 0.8, 0.1});
  }
};

// Records the premises it sees.
class RecordingBackend final : public NliBackend {
 public:
  std::string model_id() const override { return "recording"; }
  std::vector<EntailmentScore> score(std::span<const NliPair> pairs) override {
    std::lock_guard lock(mu);
    for (const auto& p : pairs) premises.insert(p.premise);
    return std::vector<EntailmentScore>(pairs.size(), {0.1, 0.8, 0.1});
  }
  std::mutex mu;
  std::set<std::string> premises;
};

TEST(ScoreViolation, SumAndRange) {
  EXPECT_FALSE(score_violation({0.2, 0.3, 0.5}));
  EXPECT_FALSE(score_violation({0.2, 0.3, 0.5009}));
  EXPECT_TRUE(score_violation({0.2, 0.3, 0.52}));
  EXPECT_TRUE(score_violation({-0.1, 0.6, 0.5}));
  EXPECT_TRUE(score_violation({1.2, -0.1, -0.1}));
  EXPECT_TRUE(score_violation({std::nan(""), 0.5, 0.5}));
}

TEST(ScoreJson, ArrayAndObject) {
  EXPECT_EQ(score_from_json(nlohmann::json::parse("[0.7,0.2,0.1]")), (EntailmentScore{0.7, 0.2, 0.1}));
  EXPECT_EQ(score_from_json(nlohmann::json::parse(R"({"entailment":0.7,"neutral":0.2,"contradiction":0.1})")),
            (EntailmentScore{0.7, 0.2, 0.1}));
  EXPECT_THROW(score_from_json(nlohmann::json::parse("[0.7,0.2]")), ValidationError);
  EXPECT_THROW(score_from_json(nlohmann::json::parse(R"({"entailment":0.7})")), ValidationError);
}

TEST(MockNli, KeywordRulesAndDefault) {
  MockNliBackend backend(fixture_rules());
  EXPECT_EQ(backend.model_id(), "mock-nli");
  EXPECT_DOUBLE_EQ(backend.lookup("My account got HACKED", "D10").entailment, 0.95);
  EXPECT_DOUBLE_EQ(backend.lookup("my account got hacked", "D01").entailment, 0.05);
  EXPECT_DOUBLE_EQ(backend.lookup("they stole it", "D10").entailment, 0.92);
  EXPECT_DOUBLE_EQ(backend.lookup("", "D10").entailment, 0.05);
}

TEST(MockNli, RejectsMalformedRules) {
  EXPECT_THROW(mock_nli_rules_from_json(nlohmann::json::parse(R"({"default":[0.5,0.5,0.5]})")), ValidationError);
  EXPECT_THROW(mock_nli_rules_from_json(nlohmann::json::parse(R"({"rules":{}})")), ValidationError);
  EXPECT_THROW(mock_nli_rules_from_json(nlohmann::json::parse(
                   R"({"rules":[{"keyword":"","hypothesis":"*","score":[1,0,0]}]})")),
               ValidationError);
}

TEST(ScoreCorpus, CardinalityAndOrder) {
  const auto corpus = small_corpus(10);
  MockNliBackend backend(fixture_rules());
  const auto out = score_corpus(corpus, builtin_finance_set(), backend, quiet());
  EXPECT_EQ(out.stats.pairs, 10u * 17u);
  ASSERT_EQ(out.matrix.rows.size(), 10u);
  EXPECT_EQ(out.matrix.hypothesis_ids.size(), 17u);
  EXPECT_EQ(out.matrix.model_id, "mock-nli");
  EXPECT_EQ(out.matrix.set_id, "finance-domain");
  for (const auto& [id, row] : out.matrix.rows) {
    ASSERT_EQ(row.scores.size(), 17u) << id;
    for (std::size_t c = 0; c < 17; ++c) {
      EXPECT_EQ(row.scores[c], backend.lookup(corpus.find(id)->text, out.matrix.hypothesis_ids[c]));
    }
  }
  EXPECT_NO_THROW(check_matrix(out.matrix, builtin_finance_set()));
}

TEST(ScoreCorpus, IndependentOfBatchingAndConcurrency) {
  const auto corpus = small_corpus(23);
  MockNliBackend a(fixture_rules()), b(fixture_rules());
  const auto serial = score_corpus(corpus, builtin_finance_set(), a, quiet(1, 1));
  const auto parallel = score_corpus(corpus, builtin_finance_set(), b, quiet(7, 8));
  EXPECT_EQ(serial.matrix, parallel.matrix);
  EXPECT_EQ(serial.stats.backend_calls, 23u * 17u);
  EXPECT_EQ(parallel.stats.backend_calls, (23u * 17u + 6) / 7);
}

TEST(ScoreCorpus, WarmCacheMakesNoCalls) {
  testing::TempDir tmp;
  const auto corpus = small_corpus(6);
  MockNliBackend backend(fixture_rules());
  EntailmentMatrix first;
  {
    ScoreCache cache(tmp / "nli-cache.log");
    const auto out = score_corpus(corpus, builtin_finance_set(), backend, quiet(), &cache);
    EXPECT_EQ(out.stats.cache_hits, 0u);
    EXPECT_GT(out.stats.backend_calls, 0u);
    first = out.matrix;
  }
  const auto calls_before = backend.calls();
  ScoreCache cache(tmp / "nli-cache.log");
  // Entries are keyed by premise content; the corpus has four distinct texts.
  EXPECT_EQ(cache.size(), 4u * 17u);
  const auto out = score_corpus(corpus, builtin_finance_set(), backend, quiet(), &cache);
  EXPECT_EQ(out.stats.backend_calls, 0u);
  EXPECT_EQ(out.stats.cache_hits, 6u * 17u);
  EXPECT_EQ(backend.calls(), calls_before);
  EXPECT_EQ(out.matrix, first);
}

TEST(ScoreCorpus, CacheKeyDependsOnModelPremiseAndHypothesis) {
  const auto k = ScoreCache::key("m", "premise", "hyp");
  EXPECT_EQ(k, ScoreCache::key("m", "premise", "hyp"));
  EXPECT_NE(k, ScoreCache::key("m2", "premise", "hyp"));
  EXPECT_NE(k, ScoreCache::key("m", "premise2", "hyp"));
  EXPECT_NE(k, ScoreCache::key("m", "premise", "hyp2"));
}

TEST(ScoreCorpus, EmptyCorpus) {
  MockNliBackend backend(fixture_rules());
  const auto out = score_corpus(Corpus{}, builtin_finance_set(), backend, quiet());
  EXPECT_TRUE(out.matrix.rows.empty());
  EXPECT_EQ(out.stats.backend_calls, 0u);
}

TEST(ScoreCorpus, MalformedScoreAborts) {
  ConstantBackend backend({0.5, 0.5, 0.5});
  EXPECT_THROW(score_corpus(small_corpus(2), builtin_finance_set(), backend, quiet()), BackendError);
}

TEST(ScoreCorpus, FatalBackendErrorIsNotRetried) {
  FailingBackend backend(400, false);
  EXPECT_THROW(score_corpus(small_corpus(1), builtin_finance_set(), backend, quiet(17)), BackendError);
  EXPECT_EQ(backend.calls.load(), 1);
}

TEST(ScoreCorpus, RetryExhaustionListsUnscoredPairs) {
  FailingBackend backend(503, true);
  auto options = quiet(17);
  options.retry.max_attempts = 3;
  try {
    score_corpus(small_corpus(2), builtin_finance_set(), backend, options);
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.pending().size(), 34u);
    EXPECT_EQ(e.pending().front(), "r000/D01");
  }
  EXPECT_EQ(backend.calls.load(), 2 * 3);
}

TEST(ScoreCorpus, PartialFailureReportsOnlyFailedBatches) {
  PartialBackend backend;
  try {
    score_corpus(small_corpus(4), builtin_finance_set(), backend, quiet(17));
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    ASSERT_EQ(e.pending().size(), 17u);
    for (const auto& p : e.pending()) EXPECT_EQ(p.substr(0, 5), "r001/");
  }
}

TEST(ScoreCorpus, PremiseTruncatedAtCodePointBudget) {
  std::string longtext;
  for (int i = 0; i < 30; ++i) longtext += "é";
  Corpus c("c", {{"r1", "a", Platform::ios, 1, {}, longtext, std::nullopt},
                 {"r2", "a", Platform::ios, 1, {}, "short", std::nullopt}});
  RecordingBackend backend;
  auto options = quiet();
  options.premise_char_budget = 10;
  const auto out = score_corpus(c, builtin_finance_set(), backend, options);
  EXPECT_EQ(out.stats.truncated_premises, 1u);
  EXPECT_TRUE(out.matrix.rows.at("r1").truncated);
  EXPECT_FALSE(out.matrix.rows.at("r2").truncated);
  std::string expected;
  for (int i = 0; i < 10; ++i) expected += "é";
  EXPECT_TRUE(backend.premises.count(expected));
  EXPECT_TRUE(backend.premises.count("short"));
}

TEST(Matrix, JsonlRoundTrip) {
  MockNliBackend backend(fixture_rules());
  const auto out = score_corpus(small_corpus(5), builtin_finance_set(), backend, quiet());
  const auto text = to_jsonl(out.matrix);
  EXPECT_EQ(matrix_from_jsonl(text), out.matrix);
  EXPECT_EQ(to_jsonl(matrix_from_jsonl(text)), text);
}

TEST(Matrix, CheckRejectsMismatchedColumns) {
  EntailmentMatrix m;
  m.set_id = "finance-domain";
  m.hypothesis_ids = {"D01", "D99"};
  m.rows["r1"].scores = {{0.1, 0.8, 0.1}, {0.1, 0.8, 0.1}};
  EXPECT_THROW(check_matrix(m, builtin_finance_set()), ValidationError);
  m.hypothesis_ids = {"D01", "D01"};
  EXPECT_THROW(check_matrix(m, builtin_finance_set()), ValidationError);
  m.hypothesis_ids = {"D01", "D02"};
  EXPECT_NO_THROW(check_matrix(m, builtin_finance_set()));
  m.rows["r1"].scores.pop_back();
  EXPECT_THROW(check_matrix(m, builtin_finance_set()), ValidationError);
  m.rows["r1"].scores.push_back({0.1, 0.8, 0.1});
  m.set_id = "other";
  EXPECT_THROW(check_matrix(m, builtin_finance_set()), ValidationError);
}

}  // namespace
}  // namespace cmer
