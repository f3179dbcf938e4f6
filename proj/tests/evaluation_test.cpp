#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cmer/error.hpp"
#include "cmer/evaluation.hpp"
#include "cmer/util.hpp"
#include "support.hpp"

namespace cmer {
namespace {

struct Row {
  const char* name;
  ConfusionCounts c;
  double p, r, f1;  // printed values
};

// LLM results table: (tp, tn, fp, fn) and printed P/R/F1.
const Row kLlmTable[] = {
    {"T5 (baseline)", {862, 532, 346, 65}, 0.71, 0.92, 0.80},
    {"Llama-3.1-8B-Instruct", {896, 581, 297, 31}, 0.75, 0.96, 0.85},
    {"GPT-4o-mini", {878, 602, 318, 44}, 0.73, 0.95, 0.82},
    {"Llama-3-8B-Instruct", {853, 527, 351, 74}, 0.70, 0.92, 0.80},
};

TEST(Metrics, ExactFractions) {
  const auto m = metrics({862, 532, 346, 65});
  EXPECT_DOUBLE_EQ(*m.precision, 862.0 / 1208.0);
  EXPECT_DOUBLE_EQ(*m.recall, 862.0 / 927.0);
  EXPECT_DOUBLE_EQ(*m.f1, 2.0 * 862.0 / (2.0 * 862.0 + 346.0 + 65.0));
}

TEST(Metrics, PrintedLlmTableWithinOneHundredth) {
  for (const auto& row : kLlmTable) {
    const auto m = metrics(row.c);
    EXPECT_NEAR(*m.precision, row.p, 0.01) << row.name;
    EXPECT_NEAR(*m.recall, row.r, 0.01) << row.name;
    EXPECT_NEAR(*m.f1, row.f1, 0.01) << row.name;
  }
}

TEST(Metrics, F1IsHarmonicMean) {
  std::mt19937 rng(5);
  for (int i = 0; i < 500; ++i) {
    ConfusionCounts c{rng() % 50 + 1, rng() % 50, rng() % 50, rng() % 50};
    const auto m = metrics(c);
    const double p = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    const double r = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    EXPECT_NEAR(*m.f1, 2 * p * r / (p + r), 1e-12);
  }
}

TEST(Metrics, UndefinedCases) {
  auto m = metrics({0, 10, 0, 0});
  EXPECT_FALSE(m.precision);
  EXPECT_FALSE(m.recall);
  EXPECT_FALSE(m.f1);
  EXPECT_EQ(format_metric(m.precision), "n/a");

  m = metrics({0, 5, 3, 0});
  EXPECT_DOUBLE_EQ(*m.precision, 0.0);
  EXPECT_FALSE(m.recall);
  EXPECT_FALSE(m.f1);

  m = metrics({0, 5, 3, 4});
  EXPECT_DOUBLE_EQ(*m.precision, 0.0);
  EXPECT_DOUBLE_EQ(*m.recall, 0.0);
  EXPECT_DOUBLE_EQ(*m.f1, 0.0);
  EXPECT_EQ(format_metric(0.5), "0.50");
  EXPECT_EQ(format_metric(2.0 / 3.0, 4), "0.6667");
}

// Domain-specific NLI row: FP=878, FN=131, 1,058 labeled positives.
TEST(Metrics, DomainSpecificNliRow) {
  const std::size_t positives = 1058, fp = 878, fn = 131;
  const std::size_t tp = positives - fn;
  EXPECT_EQ(tp, 927u);
  EXPECT_EQ(tp + fp, 1805u);
  const auto m = metrics({tp, 3519 - positives - fp, fp, fn});
  EXPECT_NEAR(*m.precision, 0.51, 0.01);
  EXPECT_NEAR(*m.recall, 0.88, 0.01);
  EXPECT_NEAR(*m.f1, 0.65, 0.01);
}

// The generic row's own counts give the DeBERTa generic-hypotheses metrics,
// not the values printed beside them.
TEST(Metrics, GenericNliRowFollowsItsCounts) {
  const std::size_t tp = 1058 - 207;
  const auto m = metrics({tp, 0, 1004, 207});
  EXPECT_NEAR(*m.precision, 0.46, 0.01);
  EXPECT_NEAR(*m.recall, 0.80, 0.01);
  EXPECT_NEAR(*m.f1, 0.59, 0.01);
  EXPECT_GT(std::abs(*m.precision - 0.42), 0.02);
}

TEST(Confusion, CountsAndOrphans) {
  const std::map<std::string, Label> truth{{"a", Label::psr}, {"b", Label::non_psr}, {"c", Label::psr}, {"d", Label::non_psr}};
  const auto c = confusion({{"a", "yes"}, {"b", "yes"}, {"c", "no"}, {"d", "no"}}, truth, "yes");
  EXPECT_EQ(c.tp, 1u);
  EXPECT_EQ(c.fp, 1u);
  EXPECT_EQ(c.fn, 1u);
  EXPECT_EQ(c.tn, 1u);
  EXPECT_EQ(c.total(), 4u);
  try {
    (void)confusion({{"a", "yes"}, {"zz", "no"}}, truth, "yes");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("zz"), std::string::npos);
  }
}

// Closed form over the 2x2 table.
double kappa_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) n11 += 1;
    else if (a[i]) n10 += 1;
    else if (b[i]) n01 += 1;
    else n00 += 1;
  }
  const double n = n11 + n10 + n01 + n00;
  const double po = (n11 + n00) / n;
  const double pe = ((n11 + n10) * (n11 + n01) + (n00 + n01) * (n00 + n10)) / (n * n);
  if (pe == 1.0) return 1.0;
  return (po - pe) / (1.0 - pe);
}

TEST(Kappa, Examples) {
  const std::vector<int> a{1, 1, 0, 0}, b{1, 0, 0, 1};
  EXPECT_DOUBLE_EQ(cohens_kappa(a, a).kappa, 1.0);
  EXPECT_NEAR(cohens_kappa(a, b).kappa, 0.0, 1e-12);
  const std::vector<int> ones{1, 1, 1};
  const auto s = cohens_kappa(ones, ones);
  EXPECT_DOUBLE_EQ(s.p_e, 1.0);
  EXPECT_DOUBLE_EQ(s.kappa, 1.0);
  const std::vector<int> x{1, 0, 1, 0}, y{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(cohens_kappa(x, y).kappa, -1.0);
}

TEST(Kappa, RandomPairsAgainstOracle) {
  std::mt19937 rng(1234);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = rng() % 40 + 1;
    std::vector<int> a(n), b(n);
    const auto bias = rng() % 4;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng() % 2);
      b[i] = rng() % 4 < bias ? a[i] : static_cast<int>(rng() % 2);
    }
    const double expected = kappa_oracle(a, b);
    const double k = cohens_kappa(a, b).kappa;
    EXPECT_NEAR(k, expected, 1e-12);
    EXPECT_NEAR(cohens_kappa(b, a).kappa, k, 1e-12);
    std::vector<int> fa(n), fb(n);
    for (std::size_t i = 0; i < n; ++i) {
      fa[i] = 1 - a[i];
      fb[i] = 1 - b[i];
    }
    EXPECT_NEAR(cohens_kappa(fa, fb).kappa, k, 1e-12);
    EXPECT_LE(k, 1.0 + 1e-12);
  }
}

TEST(Kappa, Errors) {
  const std::vector<int> a{1, 0}, b{1}, c{1, 2}, empty;
  EXPECT_THROW(cohens_kappa(a, b), ValidationError);
  EXPECT_THROW(cohens_kappa(a, c), ValidationError);
  EXPECT_THROW(cohens_kappa(empty, empty), ValidationError);
}

TEST(Kappa, LabelListFormats) {
  testing::TempDir tmp;
  write_file_atomic(tmp / "a.json", "[1,0,1]");
  write_file_atomic(tmp / "b.txt", "1\n0\n\n1\n");
  write_file_atomic(tmp / "c.txt", "1\nyes\n");
  EXPECT_EQ(load_label_list(tmp / "a.json"), (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(load_label_list(tmp / "b.txt"), (std::vector<int>{1, 0, 1}));
  EXPECT_THROW(load_label_list(tmp / "c.txt"), ValidationError);
}

// Reconstructed generic-hypotheses NLI comparison, 1,058 positives.
TEST(CompareReport, NliModelsPickDeberta) {
  const std::vector<std::pair<std::string, ConfusionCounts>> runs{
      {"Roberta-large-mnli", {889, 0, 1228, 169}},
      {"DeBERTa-v3-base-mnli-fever-anli", {851, 0, 1004, 207}},
      {"T5-base", {518, 0, 810, 540}},
      {"Nli-roberta-base", {751, 0, 956, 307}},
  };
  const auto r = compare_report(runs);
  EXPECT_EQ(r.best().name, "DeBERTa-v3-base-mnli-fever-anli");
  const double printed[][3] = {{0.42, 0.84, 0.56}, {0.46, 0.80, 0.59}, {0.39, 0.49, 0.43}, {0.44, 0.71, 0.54}};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    EXPECT_NEAR(*r.runs[i].metrics.precision, printed[i][0], 0.01) << runs[i].first;
    EXPECT_NEAR(*r.runs[i].metrics.recall, printed[i][1], 0.01) << runs[i].first;
    EXPECT_NEAR(*r.runs[i].metrics.f1, printed[i][2], 0.01) << runs[i].first;
  }
  EXPECT_EQ(std::count_if(r.runs.begin(), r.runs.end(), [](const auto& x) { return x.best; }), 1);
}

TEST(CompareReport, LlmTablePicksLlama31) {
  std::vector<std::pair<std::string, ConfusionCounts>> runs;
  for (const auto& row : kLlmTable) runs.emplace_back(row.name, row.c);
  EXPECT_EQ(compare_report(runs).best().name, "Llama-3.1-8B-Instruct");
}

TEST(CompareReport, TieBreaks) {
  // Same F1 (tp=2, fp+fn=2), different recall.
  auto r = compare_report({{"b", {2, 0, 2, 0}}, {"a", {2, 0, 0, 2}}});
  EXPECT_EQ(r.best().name, "b");
  // Identical metrics: smaller name wins.
  r = compare_report({{"zeta", {3, 1, 1, 1}}, {"alpha", {3, 1, 1, 1}}});
  EXPECT_EQ(r.best().name, "alpha");
  // Undefined F1 ranks below zero.
  r = compare_report({{"none", {0, 4, 0, 0}}, {"zero", {0, 2, 1, 1}}});
  EXPECT_EQ(r.best().name, "zero");
  EXPECT_THROW(compare_report({}), ValidationError);
}

TEST(CompareReport, JsonAndMarkdown) {
  const auto r = compare_report({{"a", {1, 1, 1, 1}}, {"b", {0, 4, 0, 0}}});
  const auto j = to_json(r);
  EXPECT_EQ(j["best"], "a");
  EXPECT_EQ(j["runs"][1]["f1"], nullptr);
  EXPECT_EQ(j["runs"][0]["precision"], 0.5);
  const auto md = to_markdown(r);
  EXPECT_NE(md.find("| a | 1 | 1 | 1 | 1 | **0.50** | **0.50** | **0.50** |"), std::string::npos) << md;
  EXPECT_NE(md.find("| b | 0 | 4 | 0 | 0 | n/a | n/a | n/a |"), std::string::npos) << md;
}

}  // namespace
}  // namespace cmer
