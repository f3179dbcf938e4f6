// cmer command-line front end. Exit codes: 0 success, 2 invalid input or
// state, 3 backend failure.

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cmer/annotation.hpp"
#include "cmer/annotation_server.hpp"
#include "cmer/corpus.hpp"
#include "cmer/error.hpp"
#include "cmer/evaluation.hpp"
#include "cmer/heuristics.hpp"
#include "cmer/hypotheses.hpp"
#include "cmer/llm.hpp"
#include "cmer/nli.hpp"
#include "cmer/pipeline.hpp"
#include "cmer/util.hpp"

namespace fs = std::filesystem;
using namespace cmer;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitBackend = 3;

std::string env_or(const char* name, const std::string& fallback = {}) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

// A --mock argument may name a rule file or a directory holding `file_name`.
fs::path mock_file(const fs::path& mock, const char* file_name) {
  const auto p = fs::is_directory(mock) ? mock / file_name : mock;
  if (!fs::is_regular_file(p)) throw ValidationError("mock rule file '" + p.string() + "' not found");
  return p;
}

// Mock rule files in a directory matching prefix*.json, sorted by name.
std::vector<fs::path> mock_files(const fs::path& dir, const std::string& prefix) {
  if (!fs::is_directory(dir)) return {mock_file(dir, "")};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.starts_with(prefix) && name.ends_with(".json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ValidationError("no " + prefix + "*.json mock files in '" + dir.string() + "'");
  return out;
}

std::unique_ptr<NliBackend> make_nli(const std::string& mock, const std::string& url, const std::string& model) {
  if (!mock.empty()) return std::make_unique<MockNliBackend>(load_mock_nli_rules(mock_file(mock, "nli.json")));
  const auto u = url.empty() ? env_or("CMER_NLI_URL") : url;
  const auto m = model.empty() ? env_or("CMER_NLI_MODEL") : model;
  if (u.empty() || m.empty()) throw ValidationError("NLI backend not configured: set CMER_NLI_URL and CMER_NLI_MODEL or pass --mock");
  return std::make_unique<HttpNliBackend>(u, m);
}

std::unique_ptr<ChatBackend> make_chat(const std::string& mock, const std::string& url, const std::string& model) {
  if (!mock.empty()) return std::make_unique<MockChatBackend>(load_mock_chat_rules(mock_file(mock, "chat.json")));
  const auto u = url.empty() ? env_or("CMER_LLM_URL") : url;
  const auto m = model.empty() ? env_or("CMER_LLM_MODEL") : model;
  if (u.empty() || m.empty()) throw ValidationError("chat backend not configured: set CMER_LLM_URL and CMER_LLM_MODEL or pass --mock");
  return std::make_unique<HttpChatBackend>(u, m, env_or("CMER_LLM_API_KEY"));
}

void write_output(const std::string& out, const std::string& contents) {
  if (out.empty() || out == "-") {
    std::cout << contents;
  } else {
    write_file_atomic(out, contents);
  }
}

void print_report(const ComparisonReport& report, const std::string& json_out) {
  std::cout << to_markdown(report);
  std::cout << "best: " << report.best().name << "\n";
  if (!json_out.empty()) write_file_atomic(json_out, to_json(report).dump(2) + "\n");
}

std::map<std::string, Label> truth_map(const Corpus& corpus) {
  std::map<std::string, Label> truth;
  for (const auto& r : corpus.reviews()) {
    if (r.label) truth.emplace(r.id, *r.label);
  }
  return truth;
}

// Predictions from a pseudo-labeled or classified JSONL file, keyed by id.
std::map<std::string, std::string> load_predictions(const fs::path& path) {
  const auto text = read_file(path);
  const auto lines = split_lines(text);
  const auto header = lines.empty() ? nlohmann::json() : nlohmann::json::parse(lines.front(), nullptr, false);
  std::map<std::string, std::string> out;
  if (header.is_object() && header.contains("prompt_version")) {
    for (const auto& [id, rec] : classified_from_jsonl(text).records) {
      out.emplace(id, rec.verdict ? std::string(to_string(*rec.verdict)) : "failed");
    }
  } else {
    for (const auto& [id, rec] : pseudo_from_jsonl(text).records) out.emplace(id, std::string(to_string(rec.label)));
  }
  return out;
}

std::atomic<AnnotationServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"cmer: mine privacy- and security-related app reviews"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "Validate a corpus file and write canonical JSONL");
  std::string in_path, format = "jsonl", out_path;
  std::optional<int> max_rating;
  ingest_cmd->add_option("--in", in_path, "Input file")->required();
  ingest_cmd->add_option("--format", format, "jsonl or csv")->check(CLI::IsMember({"jsonl", "csv"}));
  ingest_cmd->add_option("--out", out_path, "Output JSONL")->required();
  ingest_cmd->add_option("--max-rating", max_rating, "Keep reviews rated at most N")->check(CLI::Range(1, 5));
  std::string quarantine_path;
  ingest_cmd->add_option("--quarantine", quarantine_path,
                         "Records empty after preprocessing (default: <out>.quarantine.jsonl)");

  // hypotheses
  auto* hyp_cmd = app.add_subcommand("hypotheses", "Inspect hypothesis sets");
  hyp_cmd->require_subcommand(1);
  auto* hyp_list = hyp_cmd->add_subcommand("list", "Print a set");
  std::string set_ref = std::string(kFinanceSetId);
  hyp_list->add_option("--set", set_ref, "Built-in set id or set file");
  auto* hyp_validate = hyp_cmd->add_subcommand("validate", "Validate a set file");
  std::string set_file;
  hyp_validate->add_option("--file", set_file, "Set file")->required();

  // nli score
  auto* nli_cmd = app.add_subcommand("nli", "Entailment scoring");
  nli_cmd->require_subcommand(1);
  auto* nli_score = nli_cmd->add_subcommand("score", "Score a corpus against a hypothesis set");
  std::string corpus_path, mock, cache_path;
  std::size_t batch_size = 16, in_flight = 8, budget = 2000;
  nli_score->add_option("--corpus", corpus_path, "Canonical JSONL corpus")->required();
  nli_score->add_option("--set", set_ref, "Built-in set id or set file");
  nli_score->add_option("--out", out_path, "Matrix JSONL")->required();
  nli_score->add_option("--mock", mock, "Mock rule file or directory");
  nli_score->add_option("--cache", cache_path, "Persistent score cache log");
  nli_score->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
  nli_score->add_option("--max-in-flight", in_flight)->check(CLI::PositiveNumber);
  nli_score->add_option("--premise-budget", budget, "Premise length limit in characters")->check(CLI::PositiveNumber);

  // label
  auto* label_cmd = app.add_subcommand("label", "Apply heuristic rules to an entailment matrix");
  std::string matrix_path, rules_ref = "default";
  label_cmd->add_option("--matrix", matrix_path, "Matrix JSONL")->required();
  label_cmd->add_option("--rules", rules_ref, "Rule file or 'default'");
  label_cmd->add_option("--out", out_path, "Pseudo-labeled JSONL")->required();
  label_cmd->add_option("--corpus", corpus_path, "Corpus whose text and labels are attached to the records");

  // classify
  auto* classify_cmd = app.add_subcommand("classify", "Classify maybe-psr records with a chat model");
  std::string template_ref = "default";
  int k = 5;
  double temperature = 0.0;
  std::size_t llm_in_flight = 4;
  classify_cmd->add_option("--in", in_path, "Pseudo-labeled JSONL")->required();
  classify_cmd->add_option("--template", template_ref, "Template file or 'default'");
  classify_cmd->add_option("--k", k, "Samples per review (odd)");
  classify_cmd->add_option("--temperature", temperature);
  classify_cmd->add_option("--out", out_path, "Classified JSONL")->required();
  classify_cmd->add_option("--mock", mock, "Mock rule file or directory");
  classify_cmd->add_option("--cache", cache_path, "Persistent response cache log");
  classify_cmd->add_option("--max-in-flight", llm_in_flight)->check(CLI::PositiveNumber);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Confusion counts and P/R/F1 against ground truth");
  std::string pred_path, truth_path, positive = "maybe-psr", report_path;
  eval_cmd->add_option("--pred", pred_path, "Pseudo-labeled or classified JSONL")->required();
  eval_cmd->add_option("--truth", truth_path, "Labeled corpus JSONL")->required();
  eval_cmd->add_option("--positive", positive)->check(CLI::IsMember({"maybe-psr", "yes"}));
  eval_cmd->add_option("--report", report_path, "Write the JSON report here");

  // kappa
  auto* kappa_cmd = app.add_subcommand("kappa", "Cohen's kappa between two label lists");
  std::string a_path, b_path;
  kappa_cmd->add_option("--a", a_path)->required();
  kappa_cmd->add_option("--b", b_path)->required();

  // annotate
  auto* ann_cmd = app.add_subcommand("annotate", "Manual inspection projects");
  ann_cmd->require_subcommand(1);
  auto* ann_create = ann_cmd->add_subcommand("create", "Create a project from yes-verdict reviews");
  std::string project_dir, classified_path, guidelines_path, lead, project_name;
  std::vector<std::string> annotators, tiebreakers;
  int coverage = 2;
  std::uint32_t seed = 0;
  ann_create->add_option("--project", project_dir, "Project directory")->required();
  ann_create->add_option("--name", project_name, "Project name (default: directory name)");
  ann_create->add_option("--classified", classified_path, "Classified JSONL")->required();
  ann_create->add_option("--corpus", corpus_path, "Corpus holding the review texts")->required();
  ann_create->add_option("--annotators", annotators, "Annotator ids")->required()->delimiter(',');
  ann_create->add_option("--lead", lead, "Annotator who receives every review");
  ann_create->add_option("--tiebreakers", tiebreakers, "Annotators kept for tie-breaks only")->delimiter(',');
  ann_create->add_option("--coverage", coverage, "First-pass raters per review");
  ann_create->add_option("--seed", seed);
  ann_create->add_option("--guidelines", guidelines_path, "Labeling instructions file");

  auto* ann_serve = ann_cmd->add_subcommand("serve", "Serve the annotation API");
  std::string host = "127.0.0.1", tokens_path;
  int port = 8080;
  ann_serve->add_option("--project", project_dir, "Project directory")->required();
  ann_serve->add_option("--port", port)->check(CLI::Range(0, 65535));
  ann_serve->add_option("--host", host);
  ann_serve->add_option("--tokens", tokens_path, "JSON map of annotator id to bearer token")->required();

  auto* ann_export = ann_cmd->add_subcommand("export", "Export adjudicated ground truth");
  ann_export->add_option("--project", project_dir, "Project directory")->required();
  ann_export->add_option("--out", out_path, "Labeled JSONL")->required();

  // mine
  auto* mine_cmd = app.add_subcommand("mine", "Run the full pipeline from a TOML config");
  std::string config_path;
  mine_cmd->add_option("--config", config_path, "Pipeline config")->required();
  mine_cmd->add_option("--mock", mock, "Directory with nli.json and chat.json");

  // evaluate-nli
  auto* evnli_cmd = app.add_subcommand("evaluate-nli", "Compare NLI models and hypothesis sets");
  std::vector<std::string> sets{std::string(kFinanceSetId)}, models, set_rules;
  std::string pseudo_out;
  evnli_cmd->add_option("--corpus", corpus_path, "Labeled corpus JSONL")->required();
  evnli_cmd->add_option("--set", sets, "Set ids or files");
  evnli_cmd->add_option("--rules", set_rules, "set_id=rule-file pairs");
  evnli_cmd->add_option("--model", models, "Live model names (uses CMER_NLI_URL)");
  evnli_cmd->add_option("--mock", mock, "Directory of nli-*.json rule files, one per model");
  evnli_cmd->add_option("--report", report_path, "Write the JSON report here");
  evnli_cmd->add_option("--pseudo-out", pseudo_out, "Pseudo-labeled JSONL of the best run");

  // evaluate-llm
  auto* evllm_cmd = app.add_subcommand("evaluate-llm", "Compare chat models on maybe-psr reviews");
  evllm_cmd->add_option("--in", in_path, "Pseudo-labeled JSONL with truth labels")->required();
  evllm_cmd->add_option("--template", template_ref, "Template file or 'default'");
  evllm_cmd->add_option("--k", k);
  evllm_cmd->add_option("--temperature", temperature);
  evllm_cmd->add_option("--model", models, "Live model names (uses CMER_LLM_URL)");
  evllm_cmd->add_option("--mock", mock, "Directory of chat-*.json rule files, one per model");
  evllm_cmd->add_option("--report", report_path, "Write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  if (ingest_cmd->parsed()) {
    auto result = ingest(in_path, parse_format(format));
    for (const auto& e : result.errors) std::cerr << in_path << ": row " << e.row << ": " << e.message << "\n";
    Corpus filtered = max_rating ? filter_by_rating(result.corpus, *max_rating) : std::move(result.corpus);
    const auto pre = preprocess_corpus(filtered);
    export_jsonl(pre.corpus, out_path);
    if (quarantine_path.empty()) quarantine_path = (fs::path(out_path).replace_extension("").string() + ".quarantine.jsonl");
    write_file_atomic(quarantine_path, to_jsonl(pre.quarantined));
    const auto counts = pre.corpus.label_counts();
    std::cerr << "ingested " << pre.corpus.size() << " review(s) (psr " << counts.psr << ", non_psr " << counts.non_psr
              << ", unlabeled " << counts.unlabeled << "), " << pre.quarantined.size() << " quarantined, "
              << result.errors.size() << " invalid record(s)\n";
    return 0;
  }

  if (hyp_list->parsed()) {
    const auto set = resolve_set(set_ref);
    std::cout << set.set_id() << ": " << set.description() << "\n";
    for (const auto& h : set.hypotheses()) std::cout << h.id << "\t" << h.category << "\t" << h.text << "\n";
    return 0;
  }
  if (hyp_validate->parsed()) {
    const auto set = load_set(set_file);
    std::cout << "ok: " << set.set_id() << " (" << set.size() << " hypotheses, " << set.categories().size()
              << " categories)\n";
    return 0;
  }

  if (nli_score->parsed()) {
    const auto corpus = ingest(corpus_path, Format::jsonl).corpus;
    const auto set = resolve_set(set_ref);
    auto backend = make_nli(mock, {}, {});
    ScoreOptions options;
    options.batch_size = batch_size;
    options.max_in_flight = in_flight;
    options.premise_char_budget = budget;
    std::optional<ScoreCache> cache;
    if (!cache_path.empty()) cache.emplace(cache_path);
    auto outcome = score_corpus(corpus, set, *backend, options, cache ? &*cache : nullptr);
    write_output(out_path, to_jsonl(outcome.matrix));
    std::cerr << "scored " << outcome.stats.pairs << " pair(s): " << outcome.stats.cache_hits << " cached, "
              << outcome.stats.backend_calls << " backend call(s), " << outcome.stats.truncated_premises
              << " truncated premise(s)\n";
    return 0;
  }

  if (label_cmd->parsed()) {
    const auto matrix = load_matrix(matrix_path);
    auto pseudo = apply_heuristics(matrix, load_rules(rules_ref));
    if (!corpus_path.empty()) attach_reviews(pseudo, ingest(corpus_path, Format::jsonl).corpus);
    write_output(out_path, to_jsonl(pseudo));
    std::cerr << pseudo.count(PseudoLabel::maybe_psr) << " maybe-psr, " << pseudo.count(PseudoLabel::maybe_not_psr)
              << " maybe-not-psr\n";
    return 0;
  }

  if (classify_cmd->parsed()) {
    const auto pseudo = load_pseudo(in_path);
    auto backend = make_chat(mock, {}, {});
    ClassifyOptions options;
    options.k = k;
    options.temperature = temperature;
    options.max_in_flight = llm_in_flight;
    std::optional<ResponseCache> cache;
    if (!cache_path.empty()) cache.emplace(cache_path);
    ClassifyStats stats;
    const auto classified = classify(pseudo, *backend, load_template(template_ref), options, cache ? &*cache : nullptr,
                                     &stats);
    write_output(out_path, to_jsonl(classified));
    std::cerr << classified.count(Verdict::yes) << " yes, " << classified.count(Verdict::no) << " no, "
              << classified.failed() << " failed; " << stats.backend_calls << " backend call(s), " << stats.cache_hits
              << " cached\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    const auto truth = truth_map(ingest(truth_path, Format::jsonl).corpus);
    const auto counts = confusion(load_predictions(pred_path), truth, positive);
    const auto report = compare_report({{fs::path(pred_path).stem().string(), counts}});
    print_report(report, report_path);
    return 0;
  }

  if (kappa_cmd->parsed()) {
    const auto a = load_label_list(a_path);
    const auto b = load_label_list(b_path);
    const auto s = cohens_kappa(a, b);
    nlohmann::ordered_json j;
    j["n"] = a.size();
    j["p_o"] = s.p_o;
    j["p_e"] = s.p_e;
    j["kappa"] = s.kappa;
    std::cout << j.dump() << "\n";
    return 0;
  }

  if (ann_create->parsed()) {
    const auto corpus = ingest(corpus_path, Format::jsonl).corpus;
    const auto classified = load_classified(classified_path);
    ProjectSpec spec;
    spec.name = project_name.empty() ? fs::path(project_dir).filename().string() : project_name;
    spec.annotators = annotators;
    spec.coverage = coverage;
    if (!lead.empty()) spec.lead = lead;
    spec.tiebreakers = tiebreakers;
    spec.seed = seed;
    spec.source = classified.model_id + "/" + classified.prompt_version + "/" + sha256_hex(read_file(classified_path));
    if (!guidelines_path.empty()) spec.guideline_text = read_file(guidelines_path);
    const auto project = AnnotationProject::create(spec, yes_candidates(classified, corpus), project_dir);
    std::cerr << "created project '" << spec.name << "' with " << project.reviews().size() << " review(s), "
              << project.tasks().size() << " task(s)\n";
    return 0;
  }

  if (ann_serve->parsed()) {
    auto project = AnnotationProject::open(project_dir);
    AnnotationServer server(project, load_tokens(tokens_path));
    const int bound = server.bind(host, port);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cerr << "serving /api/projects/" << project.spec().name << " on http://" << host << ":" << bound << "\n";
    server.listen();
    g_server = nullptr;
    return 0;
  }

  if (ann_export->parsed()) {
    const auto project = AnnotationProject::open(project_dir);
    const auto corpus = project.export_ground_truth();
    export_jsonl(corpus, out_path);
    const auto counts = corpus.label_counts();
    std::cerr << "exported " << corpus.size() << " review(s): " << counts.psr << " psr, " << counts.non_psr
              << " non_psr\n";
    return 0;
  }

  if (mine_cmd->parsed()) {
    const auto config = load_config(config_path);
    auto nli = make_nli(mock, config.nli_url, config.nli_model);
    auto chat = make_chat(mock, config.llm_url, config.llm_model);
    const auto result = mine(config, *nli, *chat);
    std::cout << result.manifest.dump(2) << "\n";
    return 0;
  }

  if (evnli_cmd->parsed()) {
    const auto corpus = ingest(corpus_path, Format::jsonl).corpus;
    std::vector<std::unique_ptr<NliBackend>> owned;
    std::vector<NamedNli> named;
    if (!mock.empty()) {
      for (const auto& f : mock_files(mock, "nli-")) owned.push_back(std::make_unique<MockNliBackend>(load_mock_nli_rules(f)));
    } else {
      if (models.empty()) models.push_back(env_or("CMER_NLI_MODEL"));
      for (const auto& m : models) owned.push_back(make_nli({}, {}, m));
    }
    for (const auto& b : owned) named.push_back({b->model_id(), b.get()});
    std::vector<HypothesisSet> resolved;
    for (const auto& s : sets) resolved.push_back(resolve_set(s));
    std::map<std::string, HeuristicRuleSet> rules;
    for (const auto& pair : set_rules) {
      const auto eq = pair.find('=');
      if (eq == std::string::npos) throw ValidationError("--rules expects set_id=rule-file, got '" + pair + "'");
      rules.emplace(pair.substr(0, eq), load_rules(pair.substr(eq + 1)));
    }
    const auto eval = evaluate_nli(corpus, named, resolved, rules);
    print_report(eval.report, report_path);
    if (!pseudo_out.empty()) write_file_atomic(pseudo_out, to_jsonl(eval.best_pseudo));
    return 0;
  }

  if (evllm_cmd->parsed()) {
    const auto pseudo = load_pseudo(in_path);
    std::vector<std::unique_ptr<ChatBackend>> owned;
    std::vector<NamedChat> named;
    if (!mock.empty()) {
      for (const auto& f : mock_files(mock, "chat-")) {
        owned.push_back(std::make_unique<MockChatBackend>(load_mock_chat_rules(f)));
      }
    } else {
      if (models.empty()) models.push_back(env_or("CMER_LLM_MODEL"));
      for (const auto& m : models) owned.push_back(make_chat({}, {}, m));
    }
    for (const auto& b : owned) named.push_back({b->model_id(), b.get()});
    ClassifyOptions options;
    options.k = k;
    options.temperature = temperature;
    const auto eval = evaluate_llm(pseudo, named, load_template(template_ref), options);
    print_report(eval.report, report_path);
    return 0;
  }
  return 0;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const PipelineError& e) {
    std::cerr << "pipeline error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return 1;
  }
}
