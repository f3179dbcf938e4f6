#include "cmer/nli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <thread>

#include "cmer/error.hpp"
#include "cmer/http.hpp"
#include "cmer/util.hpp"

namespace cmer {

std::optional<std::string> score_violation(const EntailmentScore& s) {
  const double parts[] = {s.entailment, s.neutral, s.contradiction};
  for (double p : parts) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) return "component outside [0,1]";
  }
  const double sum = s.entailment + s.neutral + s.contradiction;
  if (std::abs(sum - 1.0) > kScoreSumTolerance) return "components sum to " + std::to_string(sum);
  return std::nullopt;
}

nlohmann::json to_json(const EntailmentScore& s) { return nlohmann::json::array({s.entailment, s.neutral, s.contradiction}); }

EntailmentScore score_from_json(const nlohmann::json& j) {
  if (j.is_array() && j.size() == 3 && j[0].is_number() && j[1].is_number() && j[2].is_number()) {
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
  }
  if (j.is_object()) {
    auto num = [&](const char* key) {
      auto it = j.find(key);
      if (it == j.end() || !it->is_number()) throw ValidationError(std::string("score lacks numeric '") + key + "'");
      return it->get<double>();
    };
    return {num("entailment"), num("neutral"), num("contradiction")};
  }
  throw ValidationError("score must be [e,n,c] or an object with entailment/neutral/contradiction");
}

// ---------------------------------------------------------------------------
// Mock backend

MockNliRules mock_nli_rules_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("mock NLI rules must be a JSON object");
  MockNliRules rules;
  if (auto it = j.find("model"); it != j.end()) rules.model_id = it->get<std::string>();
  if (auto it = j.find("default"); it != j.end()) rules.default_score = score_from_json(*it);
  if (auto v = score_violation(rules.default_score)) throw ValidationError("mock default score: " + *v);
  if (auto it = j.find("rules"); it != j.end()) {
    if (!it->is_array()) throw ValidationError("mock NLI 'rules' must be an array");
    for (const auto& r : *it) {
      MockNliRule rule{r.at("keyword").get<std::string>(), r.at("hypothesis").get<std::string>(),
                       score_from_json(r.at("score"))};
      if (rule.keyword.empty()) throw ValidationError("mock NLI rule with empty keyword");
      if (auto v = score_violation(rule.score)) {
        throw ValidationError("mock rule '" + rule.keyword + "'/" + rule.hypothesis_id + ": " + *v);
      }
      rules.rules.push_back(std::move(rule));
    }
  }
  return rules;
}

MockNliRules load_mock_nli_rules(const std::filesystem::path& path) {
  auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ValidationError("'" + path.string() + "' is not valid JSON");
  return mock_nli_rules_from_json(j);
}

MockNliBackend::MockNliBackend(MockNliRules rules) : rules_(std::move(rules)) {
  for (const auto& r : rules_.rules) lowered_keywords_.push_back(ascii_lower(r.keyword));
}

EntailmentScore MockNliBackend::lookup(std::string_view premise, std::string_view hypothesis_id) const {
  if (premise.empty()) return rules_.default_score;
  const auto lowered = ascii_lower(premise);
  for (std::size_t i = 0; i < rules_.rules.size(); ++i) {
    const auto& rule = rules_.rules[i];
    if (rule.hypothesis_id != "*" && rule.hypothesis_id != hypothesis_id) continue;
    if (lowered.find(lowered_keywords_[i]) != std::string::npos) return rule.score;
  }
  return rules_.default_score;
}

std::vector<EntailmentScore> MockNliBackend::score(std::span<const NliPair> pairs) {
  ++calls_;
  std::vector<EntailmentScore> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(lookup(p.premise, p.hypothesis_id));
  return out;
}

std::unique_ptr<MockNliBackend> mock_backend(MockNliRules rules) {
  return std::make_unique<MockNliBackend>(std::move(rules));
}

// ---------------------------------------------------------------------------
// HTTP backend

HttpNliBackend::HttpNliBackend(std::string base_url, std::string model, std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)), model_(std::move(model)), timeout_(timeout) {}

std::vector<EntailmentScore> HttpNliBackend::score(std::span<const NliPair> pairs) {
  nlohmann::json body;
  body["model"] = model_;
  auto& arr = body["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) arr.push_back({{"premise", p.premise}, {"hypothesis", p.hypothesis_text}});

  const auto response = post_json(base_url_, "/v1/entailment", body, {}, timeout_);
  auto it = response.find("scores");
  if (it == response.end() || !it->is_array()) throw BackendError("entailment response lacks 'scores'", 200, false);
  if (it->size() != pairs.size()) {
    throw BackendError("entailment response has " + std::to_string(it->size()) + " scores for " +
                           std::to_string(pairs.size()) + " pairs",
                       200, false);
  }
  std::vector<EntailmentScore> out;
  out.reserve(pairs.size());
  for (const auto& s : *it) {
    try {
      out.push_back(score_from_json(s));
    } catch (const ValidationError& e) {
      throw BackendError(std::string("malformed entailment score: ") + e.what(), 200, false);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix serialization

std::string to_jsonl(const EntailmentMatrix& m) {
  nlohmann::ordered_json header;
  header["model_id"] = m.model_id;
  header["set_id"] = m.set_id;
  header["hypotheses"] = m.hypothesis_ids;
  std::string out = header.dump() + "\n";
  for (const auto& [id, row] : m.rows) {
    nlohmann::ordered_json line;
    line["id"] = id;
    auto& scores = line["scores"] = nlohmann::ordered_json::array();
    for (const auto& s : row.scores) scores.push_back({s.entailment, s.neutral, s.contradiction});
    line["truncated"] = row.truncated;
    out += line.dump();
    out += '\n';
  }
  return out;
}

EntailmentMatrix matrix_from_jsonl(std::string_view text) {
  EntailmentMatrix m;
  bool have_header = false;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw ValidationError("matrix line " + std::to_string(line_no) + " is not a JSON object");
    }
    if (!have_header) {
      m.model_id = j.at("model_id").get<std::string>();
      m.set_id = j.at("set_id").get<std::string>();
      m.hypothesis_ids = j.at("hypotheses").get<std::vector<std::string>>();
      have_header = true;
      continue;
    }
    EntailmentMatrix::Row row;
    for (const auto& s : j.at("scores")) row.scores.push_back(score_from_json(s));
    row.truncated = j.value("truncated", false);
    if (row.scores.size() != m.hypothesis_ids.size()) {
      throw ValidationError("matrix line " + std::to_string(line_no) + " has " + std::to_string(row.scores.size()) +
                            " scores, expected " + std::to_string(m.hypothesis_ids.size()));
    }
    auto id = j.at("id").get<std::string>();
    if (!m.rows.emplace(id, std::move(row)).second) throw ValidationError("matrix repeats review id '" + id + "'");
  }
  if (!have_header) throw ValidationError("matrix file is empty");
  return m;
}

EntailmentMatrix load_matrix(const std::filesystem::path& path) { return matrix_from_jsonl(read_file(path)); }

void check_matrix(const EntailmentMatrix& m, const HypothesisSet& set) {
  if (m.set_id != set.set_id()) {
    throw ValidationError("matrix was scored against set '" + m.set_id + "', not '" + set.set_id() + "'");
  }
  std::vector<std::string> seen;
  for (const auto& id : m.hypothesis_ids) {
    if (!set.find(id)) throw ValidationError("matrix column '" + id + "' not in set '" + set.set_id() + "'");
    if (std::find(seen.begin(), seen.end(), id) != seen.end()) {
      throw ValidationError("matrix column '" + id + "' appears twice");
    }
    seen.push_back(id);
  }
  for (const auto& [id, row] : m.rows) {
    if (row.scores.size() != m.hypothesis_ids.size()) {
      throw ValidationError("matrix row '" + id + "' is incomplete");
    }
  }
}

// ---------------------------------------------------------------------------
// Cache

std::string ScoreCache::key(std::string_view model_id, std::string_view premise, std::string_view hypothesis_text) {
  return std::string(model_id) + "|" + sha256_hex(premise) + "|" + sha256_hex(hypothesis_text);
}

std::optional<EntailmentScore> ScoreCache::get(const std::string& key) const {
  auto v = log_.get(key);
  if (!v) return std::nullopt;
  try {
    auto s = score_from_json(*v);
    if (score_violation(s)) return std::nullopt;
    return s;
  } catch (const ValidationError&) {
    return std::nullopt;
  }
}

void ScoreCache::put(const std::string& key, const EntailmentScore& score) { log_.put(key, to_json(score)); }

// ---------------------------------------------------------------------------
// Scoring

namespace {

struct PendingPair {
  std::size_t row;
  std::size_t column;
  std::string cache_key;
};

}  // namespace

ScoreOutcome score_corpus(const Corpus& corpus, const HypothesisSet& set, NliBackend& backend,
                          const ScoreOptions& options, ScoreCache* cache) {
  if (options.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (options.max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");

  const auto& reviews = corpus.reviews();
  const auto& hyps = set.hypotheses();
  const auto model = backend.model_id();

  ScoreOutcome out;
  out.matrix.model_id = model;
  out.matrix.set_id = set.set_id();
  for (const auto& h : hyps) out.matrix.hypothesis_ids.push_back(h.id);

  std::vector<std::string> premises;
  std::vector<std::vector<std::optional<EntailmentScore>>> grid(reviews.size(),
                                                               std::vector<std::optional<EntailmentScore>>(hyps.size()));
  std::vector<bool> truncated(reviews.size(), false);
  std::vector<PendingPair> pending;

  for (std::size_t r = 0; r < reviews.size(); ++r) {
    const auto& text = reviews[r].text;
    auto premise = utf8_prefix(text, options.premise_char_budget);
    truncated[r] = premise.size() < text.size();
    if (truncated[r]) ++out.stats.truncated_premises;
    premises.emplace_back(premise);
    for (std::size_t c = 0; c < hyps.size(); ++c) {
      ++out.stats.pairs;
      auto key = ScoreCache::key(model, premises.back(), hyps[c].text);
      if (cache) {
        if (auto hit = cache->get(key)) {
          grid[r][c] = *hit;
          ++out.stats.cache_hits;
          continue;
        }
      }
      pending.push_back({r, c, std::move(key)});
    }
  }

  const std::size_t batch_count = (pending.size() + options.batch_size - 1) / options.batch_size;
  std::atomic<std::size_t> next_batch{0};
  std::atomic<std::size_t> calls{0};
  std::atomic<bool> abort{false};
  std::mutex err_mu;
  std::exception_ptr fatal;
  std::vector<std::string> unscored;

  auto label = [&](const PendingPair& p) { return reviews[p.row].id + "/" + hyps[p.column].id; };

  auto worker = [&] {
    while (!abort.load()) {
      const std::size_t b = next_batch.fetch_add(1);
      if (b >= batch_count) return;
      const std::size_t begin = b * options.batch_size;
      const std::size_t end = std::min(pending.size(), begin + options.batch_size);

      std::vector<NliPair> request;
      request.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        const auto& p = pending[i];
        request.push_back({premises[p.row], hyps[p.column].id, hyps[p.column].text});
      }
      try {
        auto scores = with_retry(
            options.retry,
            [&] {
              ++calls;
              auto s = backend.score(request);
              if (s.size() != request.size()) {
                throw BackendError("backend returned " + std::to_string(s.size()) + " scores for " +
                                       std::to_string(request.size()) + " pairs",
                                   0, false);
              }
              return s;
            },
            options.sleeper);
        for (std::size_t i = begin; i < end; ++i) {
          const auto& p = pending[i];
          const auto& s = scores[i - begin];
          if (auto v = score_violation(s)) {
            throw BackendError("malformed score for pair " + label(p) + ": " + *v, 0, false);
          }
          grid[p.row][p.column] = s;
          if (cache) cache->put(p.cache_key, s);
        }
      } catch (const BackendError& e) {
        std::lock_guard lock(err_mu);
        if (e.retryable()) {
          for (std::size_t i = begin; i < end; ++i) unscored.push_back(label(pending[i]));
        } else {
          if (!fatal) fatal = std::current_exception();
          abort = true;
        }
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!fatal) fatal = std::current_exception();
        abort = true;
      }
    }
  };

  const std::size_t n_workers = std::min(options.max_in_flight, batch_count);
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    threads.reserve(n_workers);
    for (std::size_t i = 0; i < n_workers; ++i) threads.emplace_back(worker);
  }
  out.stats.backend_calls = calls.load();

  if (fatal) std::rethrow_exception(fatal);
  if (!unscored.empty()) {
    std::sort(unscored.begin(), unscored.end());
    throw PipelineError("NLI backend unreachable after retries; " + std::to_string(unscored.size()) +
                            " pairs unscored: " + join_limited(unscored),
                        std::move(unscored));
  }

  for (std::size_t r = 0; r < reviews.size(); ++r) {
    EntailmentMatrix::Row row;
    row.truncated = truncated[r];
    row.scores.reserve(hyps.size());
    for (auto& cell : grid[r]) row.scores.push_back(*cell);
    out.matrix.rows.emplace(reviews[r].id, std::move(row));
  }
  return out;
}

}  // namespace cmer
