#include "cmer/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include <toml.hpp>

#include "cmer/error.hpp"
#include "cmer/util.hpp"

namespace cmer {

// ---------------------------------------------------------------------------
// Config

namespace {

class TomlReader {
 public:
  TomlReader(const toml::table& root, std::filesystem::path base) : root_(root), base_(std::move(base)) {}

  // Rejects keys the config does not define.
  void allow(const toml::table& t, const std::string& where, std::initializer_list<std::string_view> keys) const {
    for (const auto& [key, node] : t) {
      const auto k = key.str();
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
        throw ValidationError("config: unknown key '" + (where.empty() ? "" : where + ".") + std::string(k) + "'");
      }
    }
  }

  const toml::table* section(std::string_view name) const {
    const auto* node = root_.get(name);
    if (!node) return nullptr;
    if (!node->is_table()) throw ValidationError("config: '" + std::string(name) + "' must be a table");
    return node->as_table();
  }

  template <typename T>
  std::optional<T> get(const toml::table* t, std::string_view section, std::string_view key) const {
    if (!t) return std::nullopt;
    const auto* node = t->get(key);
    if (!node) return std::nullopt;
    const auto where = (section.empty() ? "" : std::string(section) + ".") + std::string(key);
    if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node->value_exact<std::string>()) return *v;
      throw ValidationError("config: '" + where + "' must be a string");
    } else if constexpr (std::is_same_v<T, double>) {
      if (auto v = node->value<double>()) return *v;
      throw ValidationError("config: '" + where + "' must be a number");
    } else {
      if (auto v = node->value_exact<std::int64_t>()) return static_cast<T>(*v);
      throw ValidationError("config: '" + where + "' must be an integer");
    }
  }

  std::filesystem::path path(const std::string& p) const {
    std::filesystem::path fp(p);
    return fp.is_relative() && !base_.empty() ? base_ / fp : fp;
  }

  // "default"/"finance-domain" style keywords pass through; anything else is a path.
  std::string ref(const std::string& v, std::string_view keyword) const {
    return v == keyword ? v : path(v).string();
  }

 private:
  const toml::table& root_;
  std::filesystem::path base_;
};

std::size_t positive_size(std::int64_t v, const char* what) {
  if (v < 1) throw ValidationError(std::string("config: '") + what + "' must be >= 1");
  return static_cast<std::size_t>(v);
}

}  // namespace

void PipelineConfig::validate() const {
  if (corpus_path.empty()) throw ValidationError("config: corpus.path is required");
  if (!std::filesystem::is_regular_file(corpus_path)) {
    throw ValidationError("config: corpus file '" + corpus_path.string() + "' does not exist");
  }
  if (max_rating && (*max_rating < 1 || *max_rating > 5)) throw ValidationError("config: corpus.max_rating must be in 1..5");
  if (hypothesis_set != kFinanceSetId && !std::filesystem::is_regular_file(hypothesis_set)) {
    throw ValidationError("config: hypothesis set '" + hypothesis_set + "' is neither built in nor an existing file");
  }
  if (rules != "default" && !std::filesystem::is_regular_file(rules)) {
    throw ValidationError("config: rule file '" + rules + "' does not exist");
  }
  if (prompt_template != "default" && !std::filesystem::is_regular_file(prompt_template)) {
    throw ValidationError("config: template file '" + prompt_template + "' does not exist");
  }
  if (k < 1 || k % 2 == 0) throw ValidationError("config: llm.k must be odd and >= 1");
  if (!(temperature >= 0.0)) throw ValidationError("config: llm.temperature must be >= 0");
  if (nli_batch_size < 1 || nli_max_in_flight < 1 || llm_max_in_flight < 1 || premise_char_budget < 1) {
    throw ValidationError("config: sizes and concurrency bounds must be >= 1");
  }
  if (output_dir.empty()) throw ValidationError("config: output_dir is required");
}

PipelineConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    const auto& where = e.source().begin;
    throw ValidationError("config: TOML parse error at line " + std::to_string(where.line) + ": " +
                          std::string(e.description()));
  }
  TomlReader r(root, base_dir);
  r.allow(root, "", {"seed", "output_dir", "corpus", "hypotheses", "heuristics", "nli", "llm"});

  PipelineConfig c;
  const toml::table* top = &root;
  if (auto v = r.get<std::int64_t>(top, "", "seed")) {
    if (*v < 0 || *v > 0xffffffffLL) throw ValidationError("config: 'seed' must fit in 32 unsigned bits");
    c.seed = static_cast<std::uint32_t>(*v);
  }
  c.output_dir = r.path(r.get<std::string>(top, "", "output_dir").value_or("out"));

  if (const auto* s = r.section("corpus")) {
    r.allow(*s, "corpus", {"path", "format", "max_rating"});
    if (auto v = r.get<std::string>(s, "corpus", "path")) c.corpus_path = r.path(*v);
    if (auto v = r.get<std::string>(s, "corpus", "format")) c.corpus_format = parse_format(*v);
    if (auto v = r.get<std::int64_t>(s, "corpus", "max_rating")) c.max_rating = static_cast<int>(*v);
  }
  if (const auto* s = r.section("hypotheses")) {
    r.allow(*s, "hypotheses", {"set"});
    if (auto v = r.get<std::string>(s, "hypotheses", "set")) c.hypothesis_set = r.ref(*v, kFinanceSetId);
  }
  if (const auto* s = r.section("heuristics")) {
    r.allow(*s, "heuristics", {"rules"});
    if (auto v = r.get<std::string>(s, "heuristics", "rules")) c.rules = r.ref(*v, "default");
  }
  if (const auto* s = r.section("nli")) {
    r.allow(*s, "nli", {"url", "model", "batch_size", "max_in_flight", "premise_char_budget"});
    if (auto v = r.get<std::string>(s, "nli", "url")) c.nli_url = *v;
    if (auto v = r.get<std::string>(s, "nli", "model")) c.nli_model = *v;
    if (auto v = r.get<std::int64_t>(s, "nli", "batch_size")) c.nli_batch_size = positive_size(*v, "nli.batch_size");
    if (auto v = r.get<std::int64_t>(s, "nli", "max_in_flight")) c.nli_max_in_flight = positive_size(*v, "nli.max_in_flight");
    if (auto v = r.get<std::int64_t>(s, "nli", "premise_char_budget")) {
      c.premise_char_budget = positive_size(*v, "nli.premise_char_budget");
    }
  }
  if (const auto* s = r.section("llm")) {
    r.allow(*s, "llm", {"url", "model", "k", "temperature", "template", "max_in_flight"});
    if (auto v = r.get<std::string>(s, "llm", "url")) c.llm_url = *v;
    if (auto v = r.get<std::string>(s, "llm", "model")) c.llm_model = *v;
    if (auto v = r.get<std::int64_t>(s, "llm", "k")) c.k = static_cast<int>(*v);
    if (auto v = r.get<double>(s, "llm", "temperature")) c.temperature = *v;
    if (auto v = r.get<std::string>(s, "llm", "template")) c.prompt_template = r.ref(*v, "default");
    if (auto v = r.get<std::int64_t>(s, "llm", "max_in_flight")) c.llm_max_in_flight = positive_size(*v, "llm.max_in_flight");
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path), path.parent_path());
}

nlohmann::ordered_json semantic_fields(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["corpus"] = {{"path", c.corpus_path.generic_string()},
                 {"format", c.corpus_format == Format::jsonl ? "jsonl" : "csv"},
                 {"max_rating", c.max_rating ? nlohmann::ordered_json(*c.max_rating) : nlohmann::ordered_json()}};
  j["hypotheses"] = c.hypothesis_set;
  j["rules"] = c.rules;
  j["nli"] = {{"url", c.nli_url}, {"model", c.nli_model}, {"premise_char_budget", c.premise_char_budget}};
  j["llm"] = {{"url", c.llm_url},
              {"model", c.llm_model},
              {"k", c.k},
              {"temperature", c.temperature},
              {"template", c.prompt_template}};
  j["seed"] = c.seed;
  return j;
}

std::string config_digest(const PipelineConfig& c) { return sha256_hex(semantic_fields(c).dump()); }

nlohmann::ordered_json strip_timestamps(nlohmann::ordered_json manifest) {
  manifest.erase("timestamps");
  return manifest;
}

// ---------------------------------------------------------------------------
// mine

namespace {

// Exclusive ownership of an output directory for one run.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw ConflictError("output directory '" + dir.string() + "' is locked by another run (remove '" +
                          path_.string() + "' if it is stale)");
    }
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace

MineResult mine(const PipelineConfig& config, NliBackend& nli, ChatBackend& chat, const MineOptions& options) {
  config.validate();
  const auto& out = config.output_dir;
  DirLock lock(out);

  nlohmann::ordered_json manifest;
  manifest["tool_version"] = std::string(kToolVersion);
  manifest["config_digest"] = config_digest(config);
  manifest["status"] = "running";
  manifest["completed_stages"] = nlohmann::ordered_json::array();
  manifest["counts"] = nlohmann::ordered_json::object();
  nlohmann::ordered_json timestamps = nlohmann::ordered_json::object();
  timestamps["started"] = utc_timestamp();

  auto save_manifest = [&] {
    auto m = manifest;
    m["timestamps"] = timestamps;
    write_file_atomic(out / "manifest.json", m.dump(2) + "\n");
  };
  auto complete = [&](const char* stage) {
    manifest["completed_stages"].push_back(stage);
    timestamps[stage] = utc_timestamp();
    save_manifest();
  };

  std::string stage = "ingest";
  try {
    auto ingested = ingest(config.corpus_path, config.corpus_format);
    manifest["counts"]["ingested"] = ingested.corpus.size();
    manifest["counts"]["ingest_errors"] = ingested.errors.size();
    {
      std::string errors;
      for (const auto& e : ingested.errors) {
        nlohmann::ordered_json j;
        j["row"] = e.row;
        j["error"] = e.message;
        errors += j.dump() + "\n";
      }
      write_file_atomic(out / "ingest-errors.jsonl", errors);
    }
    complete("ingest");

    stage = "filter";
    Corpus filtered =
        config.max_rating ? filter_by_rating(ingested.corpus, *config.max_rating) : std::move(ingested.corpus);
    manifest["counts"]["filtered"] = filtered.size();
    complete("filter");

    stage = "preprocess";
    auto pre = preprocess_corpus(filtered);
    manifest["counts"]["quarantined"] = pre.quarantined.size();
    manifest["counts"]["preprocessed"] = pre.corpus.size();
    write_file_atomic(out / "corpus.jsonl", to_jsonl(pre.corpus));
    write_file_atomic(out / "quarantine.jsonl", to_jsonl(pre.quarantined));
    complete("preprocess");

    stage = "score";
    const auto set = resolve_set(config.hypothesis_set);
    ScoreOptions so;
    so.batch_size = config.nli_batch_size;
    so.max_in_flight = config.nli_max_in_flight;
    so.premise_char_budget = config.premise_char_budget;
    so.sleeper = options.sleeper;
    std::optional<ScoreCache> score_cache;
    if (options.use_cache) score_cache.emplace(out / "nli-cache.log");
    auto scored = score_corpus(pre.corpus, set, nli, so, score_cache ? &*score_cache : nullptr);
    write_file_atomic(out / "matrix.jsonl", to_jsonl(scored.matrix));
    manifest["counts"]["scored"] = scored.matrix.rows.size();
    manifest["nli"] = {{"model", nli.model_id()},
                       {"set", set.set_id()},
                       {"hypotheses", set.size()},
                       {"pairs", scored.stats.pairs},
                       {"cache_hits", scored.stats.cache_hits},
                       {"backend_calls", scored.stats.backend_calls},
                       {"truncated_premises", scored.stats.truncated_premises}};
    complete("score");

    stage = "heuristics";
    const auto rules = load_rules(config.rules);
    auto pseudo = apply_heuristics(scored.matrix, rules);
    attach_reviews(pseudo, pre.corpus);
    write_file_atomic(out / "pseudo.jsonl", to_jsonl(pseudo));
    manifest["counts"]["maybe_psr"] = pseudo.count(PseudoLabel::maybe_psr);
    manifest["counts"]["maybe_not_psr"] = pseudo.count(PseudoLabel::maybe_not_psr);
    complete("heuristics");

    stage = "classify";
    const auto tmpl = load_template(config.prompt_template);
    ClassifyOptions co;
    co.k = config.k;
    co.temperature = config.temperature;
    co.max_in_flight = config.llm_max_in_flight;
    co.sleeper = options.sleeper;
    std::optional<ResponseCache> response_cache;
    if (options.use_cache) response_cache.emplace(out / "llm-cache.log");
    ClassifyStats cs;
    auto classified = classify(pseudo, chat, tmpl, co, response_cache ? &*response_cache : nullptr, &cs);
    write_file_atomic(out / "classified.jsonl", to_jsonl(classified));
    manifest["counts"]["classified"] = classified.records.size();
    manifest["counts"]["yes"] = classified.count(Verdict::yes);
    manifest["counts"]["no"] = classified.count(Verdict::no);
    manifest["counts"]["failed"] = classified.failed();
    manifest["llm"] = {{"model", chat.model_id()},
                       {"prompt_version", tmpl.version},
                       {"k", config.k},
                       {"temperature", config.temperature},
                       {"requests", cs.requests},
                       {"cache_hits", cs.cache_hits},
                       {"backend_calls", cs.backend_calls},
                       {"resampled", cs.resampled}};
    // reviews x hypotheses x models, and reviews x samples.
    manifest["inference_operations"] = {{"nli", pre.corpus.size() * set.size() * 1},
                                        {"llm", cs.requests}};
    manifest["status"] = "complete";
    complete("classify");
    return {std::move(pseudo), std::move(classified), strip_timestamps(manifest)};
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["failed_stage"] = stage;
    manifest["error"] = e.what();
    timestamps["failed"] = utc_timestamp();
    try {
      save_manifest();
    } catch (...) {
    }
    throw;
  }
}

// ---------------------------------------------------------------------------
// Evaluation loops

NliEvaluation evaluate_nli(const Corpus& labeled, const std::vector<NamedNli>& models,
                           const std::vector<HypothesisSet>& sets,
                           const std::map<std::string, HeuristicRuleSet>& rules, const ScoreOptions& options) {
  if (models.empty()) throw ValidationError("evaluate-nli needs at least one model");
  if (sets.empty()) throw ValidationError("evaluate-nli needs at least one hypothesis set");
  std::map<std::string, Label> truth;
  std::vector<std::string> unlabeled;
  for (const auto& r : labeled.reviews()) {
    if (r.label) {
      truth.emplace(r.id, *r.label);
    } else {
      unlabeled.push_back(r.id);
    }
  }
  if (!unlabeled.empty()) throw ValidationError("evaluation corpus has unlabeled reviews: " + join_limited(unlabeled));

  const auto pre = preprocess_corpus(labeled);
  NliEvaluation out;
  std::vector<std::pair<std::string, ConfusionCounts>> runs;
  for (const auto& model : models) {
    for (const auto& set : sets) {
      auto rule_it = rules.find(set.set_id());
      const auto& r = rule_it == rules.end() ? default_rules() : rule_it->second;
      auto scored = score_corpus(pre.corpus, set, *model.backend, options);
      auto pseudo = apply_heuristics(scored.matrix, r);
      attach_reviews(pseudo, pre.corpus);
      std::map<std::string, std::string> predictions;
      for (const auto& [id, rec] : pseudo.records) predictions.emplace(id, std::string(to_string(rec.label)));
      runs.emplace_back(model.name + "/" + set.set_id(), confusion(predictions, truth, "maybe-psr"));
      out.pseudo.push_back(std::move(pseudo));
    }
  }
  out.report = compare_report(runs);
  out.best_pseudo = out.pseudo.at(out.report.best_index);
  return out;
}

LlmEvaluation evaluate_llm(const PseudoLabeledCorpus& pseudo, const std::vector<NamedChat>& backends,
                           const PromptTemplate& tmpl, const ClassifyOptions& options) {
  if (backends.empty()) throw ValidationError("evaluate-llm needs at least one backend");
  std::map<std::string, Label> truth;
  std::vector<std::string> unlabeled;
  for (const auto& [id, rec] : pseudo.records) {
    if (rec.label != PseudoLabel::maybe_psr) continue;
    if (rec.truth) {
      truth.emplace(id, *rec.truth);
    } else {
      unlabeled.push_back(id);
    }
  }
  if (!unlabeled.empty()) throw ValidationError("records without a truth label: " + join_limited(unlabeled));

  LlmEvaluation out;
  std::vector<std::pair<std::string, ConfusionCounts>> runs;
  for (const auto& b : backends) {
    auto classified = classify(pseudo, *b.backend, tmpl, options);
    std::map<std::string, std::string> predictions;
    for (const auto& [id, rec] : classified.records) {
      if (rec.verdict) predictions.emplace(id, std::string(to_string(*rec.verdict)));
    }
    runs.emplace_back(b.name, confusion(predictions, truth, "yes"));
    out.classified.push_back(std::move(classified));
  }
  out.report = compare_report(runs);
  return out;
}

}  // namespace cmer
