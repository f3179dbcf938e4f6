#include <gtest/gtest.h>
#include <httplib.h>

#include <cstdlib>
#include <thread>

#include "cmer/corpus.hpp"
#include "cmer/heuristics.hpp"
#include "cmer/llm.hpp"
#include "cmer/util.hpp"
#include "support.hpp"

namespace cmer {
namespace {

using testing::run_cmer;

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

const std::filesystem::path kMine = testing::source_path("fixtures/mine");

// Config equivalent to the fixture but writing under `dir`.
std::filesystem::path write_config(const testing::TempDir& dir) {
  const auto path = dir / "mine.toml";
  write_file_atomic(path, "seed = 7\noutput_dir = \"out\"\n[corpus]\npath = \"" + (kMine / "reviews.jsonl").string() +
                              "\"\nmax_rating = 2\n[llm]\nk = 5\nmax_in_flight = 2\n");
  return path;
}

TEST(Cli, VersionAndUsage) {
  auto r = run_cmer("--version");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.output.find(kToolVersion), std::string::npos);
  EXPECT_EQ(run_cmer("").exit_code, 2);
  EXPECT_EQ(run_cmer("frobnicate").exit_code, 2);
  EXPECT_EQ(run_cmer("ingest --in x").exit_code, 2);
}

TEST(Cli, IngestReportsRowErrorsAndFilters) {
  testing::TempDir tmp;
  write_file_atomic(tmp / "in.jsonl",
                    R"({"id":"a","app":"x","platform":"ios","rating":1,"date":"2024-01-01","text":"one"})"
                    "\n{broken\n"
                    R"({"id":"b","app":"x","platform":"ios","rating":4,"date":"2024-01-01","text":"four"})"
                    "\n");
  const auto r = run_cmer("ingest --in " + q(tmp / "in.jsonl") + " --out " + q(tmp / "out.jsonl") + " --max-rating 2");
  EXPECT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("row 2"), std::string::npos) << r.output;
  const auto out = ingest(tmp / "out.jsonl", Format::jsonl).corpus;
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.reviews()[0].id, "a");
  EXPECT_TRUE(std::filesystem::exists(tmp / "out.quarantine.jsonl"));
  EXPECT_EQ(run_cmer("ingest --in " + q(tmp / "missing") + " --out " + q(tmp / "o")).exit_code, 2);
}

TEST(Cli, Hypotheses) {
  auto r = run_cmer("hypotheses list");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.output.find("D17"), std::string::npos);
  r = run_cmer("hypotheses validate --file " + q(testing::source_path("data/hypotheses/finance-domain.json")));
  EXPECT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("17 hypotheses, 4 categories"), std::string::npos) << r.output;
  testing::TempDir tmp;
  write_file_atomic(tmp / "bad.json", R"({"set_id":"x","hypotheses":[]})");
  EXPECT_EQ(run_cmer("hypotheses validate --file " + q(tmp / "bad.json")).exit_code, 2);
  EXPECT_EQ(run_cmer("hypotheses list --set nope").exit_code, 2);
}

TEST(Cli, StagewiseRunMatchesMine) {
  testing::TempDir tmp;
  const auto mock = kMine / "mock";
  auto r = run_cmer("ingest --in " + q(kMine / "reviews.jsonl") + " --out " + q(tmp / "corpus.jsonl") +
                    " --max-rating 2");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  r = run_cmer("nli score --corpus " + q(tmp / "corpus.jsonl") + " --out " + q(tmp / "matrix.jsonl") + " --mock " +
               q(mock));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  r = run_cmer("label --matrix " + q(tmp / "matrix.jsonl") + " --corpus " + q(tmp / "corpus.jsonl") + " --out " +
               q(tmp / "pseudo.jsonl"));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("12 maybe-psr, 28 maybe-not-psr"), std::string::npos) << r.output;
  r = run_cmer("classify --in " + q(tmp / "pseudo.jsonl") + " --out " + q(tmp / "classified.jsonl") + " --mock " +
               q(mock));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("7 yes, 4 no, 1 failed"), std::string::npos) << r.output;

  r = run_cmer("evaluate --pred " + q(tmp / "pseudo.jsonl") + " --truth " + q(tmp / "corpus.jsonl"));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("| 6 | 27 | 6 | 1 |"), std::string::npos) << r.output;

  const auto config = write_config(tmp);
  r = run_cmer("mine --config " + q(config) + " --mock " + q(mock));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(load_pseudo(tmp / "out/pseudo.jsonl"), load_pseudo(tmp / "pseudo.jsonl"));
  EXPECT_EQ(load_classified(tmp / "out/classified.jsonl"), load_classified(tmp / "classified.jsonl"));
}

TEST(Cli, MineRefusesLockedDirectory) {
  testing::TempDir tmp;
  const auto config = write_config(tmp);
  std::filesystem::create_directories(tmp / "out");
  write_file_atomic(tmp / "out/.lock", "1\n");
  const auto r = run_cmer("mine --config " + q(config) + " --mock " + q(kMine / "mock"));
  EXPECT_EQ(r.exit_code, 2) << r.output;
}

TEST(Cli, MineWithoutBackendIsInvalid) {
  testing::TempDir tmp;
  ::unsetenv("CMER_NLI_URL");
  ::unsetenv("CMER_NLI_MODEL");
  const auto r = run_cmer("mine --config " + q(write_config(tmp)));
  EXPECT_EQ(r.exit_code, 2) << r.output;
  EXPECT_NE(r.output.find("CMER_NLI_URL"), std::string::npos);
}

TEST(Cli, BackendRejectionExitsThree) {
  httplib::Server server;
  server.Post("/v1/entailment", [](const httplib::Request&, httplib::Response& res) {
    res.status = 401;
    res.set_content(R"({"error":"bad key"})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  testing::TempDir tmp;
  ::setenv("CMER_NLI_URL", ("http://127.0.0.1:" + std::to_string(port)).c_str(), 1);
  ::setenv("CMER_NLI_MODEL", "m", 1);
  const auto r = run_cmer("nli score --corpus " + q(kMine / "reviews.jsonl") + " --out " + q(tmp / "m.jsonl"));
  ::unsetenv("CMER_NLI_URL");
  ::unsetenv("CMER_NLI_MODEL");
  server.stop();
  t.join();
  EXPECT_EQ(r.exit_code, 3) << r.output;
  EXPECT_NE(r.output.find("401"), std::string::npos) << r.output;
  EXPECT_FALSE(std::filesystem::exists(tmp / "m.jsonl"));
}

TEST(Cli, Kappa) {
  testing::TempDir tmp;
  write_file_atomic(tmp / "a.txt", "1\n1\n0\n0\n");
  write_file_atomic(tmp / "b.json", "[1,0,0,1]");
  auto r = run_cmer("kappa --a " + q(tmp / "a.txt") + " --b " + q(tmp / "b.json"));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const auto j = nlohmann::json::parse(r.output);
  EXPECT_EQ(j["n"], 4);
  EXPECT_NEAR(j["kappa"].get<double>(), 0.0, 1e-12);
  write_file_atomic(tmp / "c.txt", "1\n");
  EXPECT_EQ(run_cmer("kappa --a " + q(tmp / "a.txt") + " --b " + q(tmp / "c.txt")).exit_code, 2);
}

TEST(Cli, EvaluateNliWithMockModels) {
  testing::TempDir tmp;
  std::filesystem::copy_file(kMine / "mock/nli.json", tmp / "nli-a.json");
  write_file_atomic(tmp / "nli-b.json", R"({"model":"blind","default":[0.1,0.8,0.1],"rules":[]})");
  const auto r = run_cmer("evaluate-nli --corpus " + q(kMine / "reviews.jsonl") + " --set finance-domain --mock " +
                          q(tmp.path()) + " --report " + q(tmp / "report.json"));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("best: mock-nli/finance-domain"), std::string::npos) << r.output;
  const auto report = nlohmann::json::parse(read_file(tmp / "report.json"));
  EXPECT_EQ(report["runs"].size(), 2u);
}

TEST(Cli, AnnotateCreateAndExportGuard) {
  testing::TempDir tmp;
  const auto fx = testing::source_path("fixtures/annotation");
  auto r = run_cmer("annotate create --project " + q(tmp / "p") + " --classified " + q(fx / "classified.jsonl") +
                    " --corpus " + q(fx / "corpus.jsonl") + " --annotators alice,bob,carol --lead alice" +
                    " --tiebreakers carol --seed 1");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("10 review(s), 20 task(s)"), std::string::npos) << r.output;
  // Nothing is labeled yet, so export is refused.
  r = run_cmer("annotate export --project " + q(tmp / "p") + " --out " + q(tmp / "gt.jsonl"));
  EXPECT_EQ(r.exit_code, 2) << r.output;
  // Creating over an existing project is refused.
  r = run_cmer("annotate create --project " + q(tmp / "p") + " --classified " + q(fx / "classified.jsonl") +
               " --corpus " + q(fx / "corpus.jsonl") + " --annotators alice,bob");
  EXPECT_EQ(r.exit_code, 2) << r.output;
}

}  // namespace
}  // namespace cmer
