#include "cmer/evaluation.hpp"

#include <algorithm>
#include <cstdio>

#include "cmer/error.hpp"
#include "cmer/util.hpp"

namespace cmer {

ConfusionCounts confusion(const std::map<std::string, std::string>& predictions,
                          const std::map<std::string, Label>& truth, std::string_view positive_token) {
  std::vector<std::string> orphans;
  ConfusionCounts c;
  for (const auto& [id, token] : predictions) {
    auto it = truth.find(id);
    if (it == truth.end()) {
      orphans.push_back(id);
      continue;
    }
    const bool predicted = token == positive_token;
    const bool actual = it->second == Label::psr;
    if (predicted && actual) {
      ++c.tp;
    } else if (predicted) {
      ++c.fp;
    } else if (actual) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  if (!orphans.empty()) {
    throw ValidationError("predictions without a truth label: " + join_limited(orphans));
  }
  return c;
}

Metrics metrics(const ConfusionCounts& c) {
  Metrics m;
  if (c.tp + c.fp > 0) m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (m.precision && m.recall) {
    const double sum = *m.precision + *m.recall;
    // Both zero only when tp == 0; the harmonic mean is then 0.
    m.f1 = sum > 0.0 ? 2.0 * *m.precision * *m.recall / sum : 0.0;
  }
  return m;
}

std::string format_metric(const std::optional<double>& v, int decimals) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, *v);
  return buf;
}

AgreementStats cohens_kappa(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) {
    throw ValidationError("kappa: label lists differ in length (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw ValidationError("kappa: label lists are empty");
  std::size_t agree = 0, a1 = 0, b1 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] != 0 && a[i] != 1) || (b[i] != 0 && b[i] != 1)) {
      throw ValidationError("kappa: labels must be 0 or 1 (position " + std::to_string(i) + ")");
    }
    agree += a[i] == b[i];
    a1 += a[i];
    b1 += b[i];
  }
  const double n = static_cast<double>(a.size());
  AgreementStats s;
  s.p_o = static_cast<double>(agree) / n;
  const double pa = static_cast<double>(a1) / n, pb = static_cast<double>(b1) / n;
  s.p_e = pa * pb + (1.0 - pa) * (1.0 - pb);
  s.kappa = s.p_e >= 1.0 ? 1.0 : (s.p_o - s.p_e) / (1.0 - s.p_e);
  return s;
}

std::vector<int> load_label_list(const std::filesystem::path& path) {
  const auto text = read_file(path);
  std::vector<int> out;
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (!j.is_discarded() && j.is_array()) {
    for (const auto& v : j) {
      if (!v.is_number_integer()) throw ValidationError("'" + path.string() + "': labels must be integers");
      out.push_back(v.get<int>());
    }
    return out;
  }
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t != "0" && t != "1") {
      throw ValidationError("'" + path.string() + "' line " + std::to_string(line_no) + ": expected 0 or 1");
    }
    out.push_back(t == "1" ? 1 : 0);
  }
  return out;
}

namespace {

// True when run a ranks strictly ahead of run b.
bool ranks_ahead(const RunResult& a, const RunResult& b) {
  const double fa = a.metrics.f1.value_or(-1.0), fb = b.metrics.f1.value_or(-1.0);
  if (fa != fb) return fa > fb;
  const double ra = a.metrics.recall.value_or(-1.0), rb = b.metrics.recall.value_or(-1.0);
  if (ra != rb) return ra > rb;
  return a.name < b.name;
}

}  // namespace

ComparisonReport compare_report(const std::vector<std::pair<std::string, ConfusionCounts>>& runs) {
  if (runs.empty()) throw ValidationError("comparison report needs at least one run");
  ComparisonReport r;
  for (const auto& [name, counts] : runs) r.runs.push_back({name, counts, metrics(counts), false});
  for (std::size_t i = 1; i < r.runs.size(); ++i) {
    if (ranks_ahead(r.runs[i], r.runs[r.best_index])) r.best_index = i;
  }
  r.runs[r.best_index].best = true;
  return r;
}

nlohmann::ordered_json to_json(const ComparisonReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  nlohmann::ordered_json j;
  j["best"] = r.best().name;
  auto& runs = j["runs"] = nlohmann::ordered_json::array();
  for (const auto& run : r.runs) {
    nlohmann::ordered_json e;
    e["name"] = run.name;
    e["tp"] = run.counts.tp;
    e["tn"] = run.counts.tn;
    e["fp"] = run.counts.fp;
    e["fn"] = run.counts.fn;
    e["precision"] = opt(run.metrics.precision);
    e["recall"] = opt(run.metrics.recall);
    e["f1"] = opt(run.metrics.f1);
    e["best"] = run.best;
    runs.push_back(std::move(e));
  }
  return j;
}

std::string to_markdown(const ComparisonReport& r) {
  std::string out = "| Run | TP | TN | FP | FN | P | R | F1 |\n|---|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& run : r.runs) {
    const auto cell = [&](const std::optional<double>& v) {
      auto s = format_metric(v);
      return run.best ? "**" + s + "**" : s;
    };
    out += "| " + run.name + " | " + std::to_string(run.counts.tp) + " | " + std::to_string(run.counts.tn) + " | " +
           std::to_string(run.counts.fp) + " | " + std::to_string(run.counts.fn) + " | " +
           cell(run.metrics.precision) + " | " + cell(run.metrics.recall) + " | " + cell(run.metrics.f1) + " |\n";
  }
  return out;
}

}  // namespace cmer
