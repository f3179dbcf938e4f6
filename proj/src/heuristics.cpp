#include "cmer/heuristics.hpp"

#include <algorithm>

#include "cmer/error.hpp"
#include "cmer/util.hpp"

namespace cmer {

std::string_view to_string(PseudoLabel l) {
  return l == PseudoLabel::maybe_psr ? "maybe-psr" : "maybe-not-psr";
}

PseudoLabel parse_pseudo_label(std::string_view s) {
  if (s == "maybe-psr") return PseudoLabel::maybe_psr;
  if (s == "maybe-not-psr") return PseudoLabel::maybe_not_psr;
  throw ValidationError("unknown pseudo-label '" + std::string(s) + "'");
}

void HeuristicRuleSet::validate() const {
  if (clauses.empty()) throw ValidationError("rule set '" + name + "' has no clauses");
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    const auto& c = clauses[i];
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) {
      throw ValidationError("rule set '" + name + "' clause " + std::to_string(i + 1) + ": threshold must be in (0,1)");
    }
    if (c.min_count < 1) {
      throw ValidationError("rule set '" + name + "' clause " + std::to_string(i + 1) + ": min_count must be >= 1");
    }
  }
}

const HeuristicRuleSet& default_rules() {
  static const HeuristicRuleSet rules{"default", {{0.85, 1}, {0.75, 3}, {0.70, 5}}, Comparison::strict};
  return rules;
}

nlohmann::ordered_json to_json(const HeuristicRuleSet& rules) {
  nlohmann::ordered_json j;
  j["name"] = rules.name;
  auto& arr = j["clauses"] = nlohmann::ordered_json::array();
  for (const auto& c : rules.clauses) {
    nlohmann::ordered_json e;
    e["threshold"] = c.threshold;
    e["min_count"] = c.min_count;
    arr.push_back(std::move(e));
  }
  j["comparison"] = rules.comparison == Comparison::strict ? "strict" : "inclusive";
  return j;
}

HeuristicRuleSet rules_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("rule file must hold a JSON object");
  HeuristicRuleSet rules;
  rules.name = j.value("name", std::string{});
  if (rules.name.empty()) throw ValidationError("rule file lacks 'name'");
  auto it = j.find("clauses");
  if (it == j.end() || !it->is_array()) throw ValidationError("rule file lacks a 'clauses' array");
  for (const auto& c : *it) {
    if (!c.is_object() || !c.contains("threshold") || !c.contains("min_count") || !c["threshold"].is_number() ||
        !c["min_count"].is_number_integer()) {
      throw ValidationError("rule set '" + rules.name + "': clause needs numeric threshold and integer min_count");
    }
    rules.clauses.push_back({c["threshold"].get<double>(), c["min_count"].get<int>()});
  }
  const auto cmp = j.value("comparison", std::string("strict"));
  if (cmp == "strict") {
    rules.comparison = Comparison::strict;
  } else if (cmp == "inclusive") {
    rules.comparison = Comparison::inclusive;
  } else {
    throw ValidationError("rule set '" + rules.name + "': comparison must be 'strict' or 'inclusive'");
  }
  rules.validate();
  return rules;
}

HeuristicRuleSet load_rules(std::string_view path_or_default) {
  if (path_or_default == "default") return default_rules();
  auto j = nlohmann::json::parse(read_file(std::string(path_or_default)), nullptr, false);
  if (j.is_discarded()) throw ValidationError("rule file '" + std::string(path_or_default) + "' is not valid JSON");
  return rules_from_json(j);
}

std::size_t count_above(std::span<const EntailmentScore> row, double threshold, Comparison comparison) {
  return static_cast<std::size_t>(std::count_if(row.begin(), row.end(), [&](const EntailmentScore& s) {
    return comparison == Comparison::strict ? s.entailment > threshold : s.entailment >= threshold;
  }));
}

PseudoLabel label_row(std::span<const EntailmentScore> row, const HeuristicRuleSet& rules,
                      std::vector<std::size_t>* counts) {
  bool fired = false;
  if (counts) counts->clear();
  for (const auto& clause : rules.clauses) {
    const auto n = count_above(row, clause.threshold, rules.comparison);
    if (counts) counts->push_back(n);
    if (n >= static_cast<std::size_t>(clause.min_count)) fired = true;
  }
  return fired ? PseudoLabel::maybe_psr : PseudoLabel::maybe_not_psr;
}

std::size_t PseudoLabeledCorpus::count(PseudoLabel l) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& kv) { return kv.second.label == l; }));
}

PseudoLabeledCorpus PseudoLabeledCorpus::positives() const {
  PseudoLabeledCorpus out{model_id, set_id, rules_name, {}};
  for (const auto& [id, rec] : records) {
    if (rec.label == PseudoLabel::maybe_psr) out.records.emplace(id, rec);
  }
  return out;
}

PseudoLabeledCorpus apply_heuristics(const EntailmentMatrix& matrix, const HeuristicRuleSet& rules) {
  rules.validate();
  PseudoLabeledCorpus out{matrix.model_id, matrix.set_id, rules.name, {}};
  for (const auto& [id, row] : matrix.rows) {
    if (row.scores.size() != matrix.hypothesis_ids.size()) {
      throw ValidationError("matrix row '" + id + "' is incomplete");
    }
    PseudoRecord rec;
    rec.label = label_row(row.scores, rules, &rec.counts);
    out.records.emplace(id, std::move(rec));
  }
  return out;
}

void attach_reviews(PseudoLabeledCorpus& pseudo, const Corpus& corpus) {
  for (auto& [id, rec] : pseudo.records) {
    if (const auto* r = corpus.find(id)) {
      rec.text = r->text;
      rec.truth = r->label;
    }
  }
}

std::string to_jsonl(const PseudoLabeledCorpus& p) {
  nlohmann::ordered_json header;
  header["model_id"] = p.model_id;
  header["set_id"] = p.set_id;
  header["rules"] = p.rules_name;
  std::string out = header.dump() + "\n";
  for (const auto& [id, rec] : p.records) {
    nlohmann::ordered_json line;
    line["id"] = id;
    line["label"] = std::string(to_string(rec.label));
    line["counts"] = rec.counts;
    if (!rec.text.empty()) line["text"] = rec.text;
    if (rec.truth) line["truth"] = static_cast<int>(*rec.truth);
    out += line.dump();
    out += '\n';
  }
  return out;
}

PseudoLabeledCorpus pseudo_from_jsonl(std::string_view text) {
  PseudoLabeledCorpus p;
  bool have_header = false;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw ValidationError("pseudo-label line " + std::to_string(line_no) + " is not a JSON object");
    }
    if (!have_header) {
      p.model_id = j.at("model_id").get<std::string>();
      p.set_id = j.at("set_id").get<std::string>();
      p.rules_name = j.at("rules").get<std::string>();
      have_header = true;
      continue;
    }
    PseudoRecord rec;
    rec.label = parse_pseudo_label(j.at("label").get<std::string>());
    rec.counts = j.value("counts", std::vector<std::size_t>{});
    rec.text = j.value("text", std::string{});
    if (j.contains("truth")) {
      const int t = j["truth"].get<int>();
      if (t != 0 && t != 1) throw ValidationError("pseudo-label line " + std::to_string(line_no) + ": truth must be 0/1");
      rec.truth = static_cast<Label>(t);
    }
    auto id = j.at("id").get<std::string>();
    if (!p.records.emplace(id, std::move(rec)).second) {
      throw ValidationError("pseudo-label file repeats id '" + id + "'");
    }
  }
  if (!have_header) throw ValidationError("pseudo-label file is empty");
  return p;
}

PseudoLabeledCorpus load_pseudo(const std::filesystem::path& path) { return pseudo_from_jsonl(read_file(path)); }

}  // namespace cmer
