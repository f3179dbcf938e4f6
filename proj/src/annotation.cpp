#include "cmer/annotation.hpp"

#include <algorithm>
#include <iostream>
#include <mutex>
#include <random>
#include <set>

#include "cmer/error.hpp"
#include "cmer/util.hpp"

namespace cmer {

std::string_view to_string(TaskKind k) { return k == TaskKind::first_pass ? "first-pass" : "tiebreak"; }

std::string_view to_string(Resolution r) { return r == Resolution::agreement ? "agreement" : "tiebreak"; }

std::string_view label_token(Label l) { return l == Label::psr ? "psr" : "non_psr"; }

Label parse_label_token(std::string_view s) {
  if (s == "psr" || s == "1") return Label::psr;
  if (s == "non_psr" || s == "non-psr" || s == "0") return Label::non_psr;
  throw ValidationError("label must be 'psr' or 'non_psr', got '" + std::string(s) + "'");
}

void ProjectSpec::validate() const {
  if (trim(name).empty()) throw ValidationError("project name is empty");
  if (name.find('/') != std::string::npos) throw ValidationError("project name must not contain '/'");
  if (coverage < 2) throw ValidationError("coverage must be >= 2");
  std::set<std::string> seen;
  for (const auto& a : annotators) {
    if (trim(a).empty()) throw ValidationError("empty annotator id");
    if (!seen.insert(a).second) throw ValidationError("duplicate annotator '" + a + "'");
  }
  if (annotators.size() < static_cast<std::size_t>(coverage) + 1) {
    throw ValidationError("coverage " + std::to_string(coverage) + " needs at least " + std::to_string(coverage + 1) +
                          " annotators (one spare for tie-breaks), got " + std::to_string(annotators.size()));
  }
  if (lead && !seen.contains(*lead)) throw ValidationError("lead annotator '" + *lead + "' is not in the annotator list");
  std::set<std::string> reserved;
  for (const auto& t : tiebreakers) {
    if (!seen.contains(t)) throw ValidationError("tie-breaker '" + t + "' is not in the annotator list");
    if (lead && t == *lead) throw ValidationError("the lead annotator cannot be reserved for tie-breaks");
    reserved.insert(t);
  }
  if (annotators.size() - reserved.size() < static_cast<std::size_t>(coverage)) {
    throw ValidationError("coverage " + std::to_string(coverage) + " needs " + std::to_string(coverage) +
                          " first-pass annotators, only " + std::to_string(annotators.size() - reserved.size()) +
                          " are not reserved for tie-breaks");
  }
}

std::vector<Review> yes_candidates(const ClassifiedCorpus& classified, const Corpus& corpus) {
  std::vector<Review> out;
  std::vector<std::string> missing;
  for (const auto& id : classified.ids_with(Verdict::yes)) {
    if (const auto* r = corpus.find(id)) {
      out.push_back(*r);
    } else {
      missing.push_back(id);
    }
  }
  if (!missing.empty()) throw ValidationError("classified ids missing from the corpus: " + join_limited(missing));
  return out;
}

namespace {

const char* kEventsFile = "events.jsonl";
const char* kSnapshotFile = "snapshot.json";

nlohmann::ordered_json task_json(const AnnotationTask& t) {
  nlohmann::ordered_json j;
  j["review_id"] = t.review_id;
  j["assigned_to"] = t.assigned_to;
  j["kind"] = std::string(to_string(t.kind));
  j["status"] = t.status == TaskStatus::pending ? "pending" : "labeled";
  j["label"] = t.label ? nlohmann::ordered_json(std::string(label_token(*t.label))) : nlohmann::ordered_json();
  j["labeled_at"] = t.labeled_at.empty() ? nlohmann::ordered_json() : nlohmann::ordered_json(t.labeled_at);
  return j;
}

std::vector<std::size_t> seeded_order(std::size_t n, std::uint32_t seed) {
  // Fisher-Yates on raw mt19937 output; std::shuffle and the standard
  // distributions are not portable across library implementations.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

}  // namespace

AnnotationProject::AnnotationProject(AnnotationProject&&) noexcept = default;
AnnotationProject& AnnotationProject::operator=(AnnotationProject&&) noexcept = default;
AnnotationProject::~AnnotationProject() = default;

AnnotationProject AnnotationProject::create(const ProjectSpec& spec, const std::vector<Review>& candidates,
                                            const std::filesystem::path& dir, Clock clock) {
  spec.validate();
  std::set<std::string> ids;
  for (const auto& r : candidates) {
    if (!ids.insert(r.id).second) throw ValidationError("duplicate candidate id '" + r.id + "'");
  }

  AnnotationProject p;
  p.clock_ = clock ? std::move(clock) : Clock(utc_timestamp);
  if (!dir.empty()) {
    if (std::filesystem::exists(dir / kEventsFile)) {
      throw ConflictError("'" + dir.string() + "' already holds an annotation project");
    }
    std::filesystem::create_directories(dir);
    p.dir_ = dir;
    p.log_.open(dir / kEventsFile, std::ios::app | std::ios::binary);
    if (!p.log_) throw IoError("cannot open '" + (dir / kEventsFile).string() + "'");
  }

  nlohmann::ordered_json created;
  created["type"] = "project-created";
  created["name"] = spec.name;
  created["annotators"] = spec.annotators;
  created["guideline"] = spec.guideline_text;
  created["coverage"] = spec.coverage;
  created["lead"] = spec.lead ? nlohmann::ordered_json(*spec.lead) : nlohmann::ordered_json();
  created["tiebreakers"] = spec.tiebreakers;
  created["seed"] = spec.seed;
  created["source"] = spec.source;
  auto& reviews = created["reviews"] = nlohmann::ordered_json::array();
  for (const auto& r : candidates) reviews.push_back(to_json(r));

  std::unique_lock lock(*p.mu_);
  p.emit(std::move(created));

  std::vector<std::string> pool;
  for (const auto& a : spec.annotators) {
    const bool reserved = std::find(spec.tiebreakers.begin(), spec.tiebreakers.end(), a) != spec.tiebreakers.end();
    if ((!spec.lead || a != *spec.lead) && !reserved) pool.push_back(a);
  }
  const auto order = seeded_order(candidates.size(), spec.seed);
  const std::size_t from_pool = static_cast<std::size_t>(spec.coverage) - (spec.lead ? 1 : 0);
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    const auto& review = candidates[order[slot]];
    std::vector<std::string> raters;
    if (spec.lead) raters.push_back(*spec.lead);
    for (std::size_t m = 0; m < from_pool; ++m) raters.push_back(pool[(slot * from_pool + m) % pool.size()]);
    for (const auto& a : raters) {
      nlohmann::ordered_json e;
      e["type"] = "task-created";
      e["review_id"] = review.id;
      e["annotator"] = a;
      e["kind"] = "first-pass";
      p.emit(std::move(e));
    }
  }
  p.write_snapshot();
  return p;
}

AnnotationProject AnnotationProject::open(const std::filesystem::path& dir, Clock clock) {
  const auto path = dir / kEventsFile;
  const auto lines = split_lines(read_file(path));
  AnnotationProject p;
  p.clock_ = clock ? std::move(clock) : Clock(utc_timestamp);
  p.dir_ = dir;
  std::size_t last = lines.size();
  while (last > 0 && trim(lines[last - 1]).empty()) --last;
  std::string valid;
  bool torn = false;
  for (std::size_t i = 0; i < last; ++i) {
    if (trim(lines[i]).empty()) continue;
    auto j = nlohmann::json::parse(lines[i], nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      if (i + 1 == last) {
        std::clog << "warning: dropping torn final event in " << path.string() << "\n";
        torn = true;
        break;
      }
      throw ValidationError(path.string() + ":" + std::to_string(i + 1) + ": corrupt event");
    }
    p.apply(j);
    valid += lines[i];
    valid += '\n';
  }
  if (p.events_ == 0) throw ValidationError("'" + path.string() + "' holds no project");
  // Later appends must not land on the torn line.
  if (torn) write_file_atomic(path, valid);
  p.log_.open(path, std::ios::app | std::ios::binary);
  if (!p.log_) throw IoError("cannot open '" + path.string() + "'");
  return p;
}

void AnnotationProject::emit(nlohmann::ordered_json event) {
  const auto line = event.dump() + "\n";
  apply(nlohmann::json::parse(line));
  if (log_.is_open()) {
    log_.write(line.data(), static_cast<std::streamsize>(line.size()));
    log_.flush();
    if (!log_) throw IoError("cannot append to '" + (dir_ / kEventsFile).string() + "'");
  }
}

void AnnotationProject::apply(const nlohmann::json& e) {
  const auto type = e.at("type").get<std::string>();
  if (events_ == 0 && type != "project-created") throw ValidationError("event log does not start with project-created");
  if (type == "project-created") {
    if (events_ != 0) throw ValidationError("repeated project-created event");
    spec_.name = e.at("name").get<std::string>();
    spec_.annotators = e.at("annotators").get<std::vector<std::string>>();
    spec_.guideline_text = e.at("guideline").get<std::string>();
    spec_.coverage = e.at("coverage").get<int>();
    if (!e.at("lead").is_null()) spec_.lead = e["lead"].get<std::string>();
    spec_.tiebreakers = e.value("tiebreakers", std::vector<std::string>{});
    spec_.seed = e.at("seed").get<std::uint32_t>();
    spec_.source = e.at("source").get<std::string>();
    for (const auto& r : e.at("reviews")) {
      auto review = review_from_json(r);
      review_order_.push_back(review.id);
      auto id = review.id;
      reviews_.emplace(std::move(id), std::move(review));
    }
  } else if (type == "task-created") {
    AnnotationTask t;
    t.review_id = e.at("review_id").get<std::string>();
    t.assigned_to = e.at("annotator").get<std::string>();
    t.kind = e.at("kind").get<std::string>() == "tiebreak" ? TaskKind::tiebreak : TaskKind::first_pass;
    if (!reviews_.contains(t.review_id)) throw ValidationError("task for unknown review '" + t.review_id + "'");
    tasks_by_review_[t.review_id].push_back(tasks_.size());
    tasks_.push_back(std::move(t));
  } else if (type == "label-submitted") {
    const auto review_id = e.at("review_id").get<std::string>();
    const auto annotator = e.at("annotator").get<std::string>();
    bool found = false;
    for (auto idx : tasks_by_review_[review_id]) {
      auto& t = tasks_[idx];
      if (t.assigned_to == annotator && t.status == TaskStatus::pending) {
        t.status = TaskStatus::labeled;
        t.label = parse_label_token(e.at("label").get<std::string>());
        t.labeled_at = e.at("at").get<std::string>();
        found = true;
        break;
      }
    }
    if (!found) throw ValidationError("label event without a pending task for " + annotator + "/" + review_id);
  } else if (type == "adjudicated") {
    Adjudication a;
    a.review_id = e.at("review_id").get<std::string>();
    for (auto idx : tasks_by_review_[a.review_id]) {
      const auto& t = tasks_[idx];
      if (t.kind == TaskKind::first_pass && t.label) a.first_labels.push_back(*t.label);
      if (t.kind == TaskKind::tiebreak && t.label) a.tiebreak_label = t.label;
    }
    a.final_label = parse_label_token(e.at("final").get<std::string>());
    a.resolved_by = e.at("resolved_by").get<std::string>() == "tiebreak" ? Resolution::tiebreak : Resolution::agreement;
    adjudications_[a.review_id] = std::move(a);
  } else {
    throw ValidationError("unknown event type '" + type + "'");
  }
  ++events_;
}

void AnnotationProject::submit_label(const std::string& annotator, const std::string& review_id, Label label) {
  std::unique_lock lock(*mu_);
  if (!reviews_.contains(review_id)) throw NotFoundError("unknown review '" + review_id + "'");
  const auto& indices = tasks_by_review_[review_id];
  std::optional<std::size_t> pending, done;
  for (auto idx : indices) {
    if (tasks_[idx].assigned_to != annotator) continue;
    (tasks_[idx].status == TaskStatus::pending ? pending : done) = idx;
  }
  if (!pending) {
    if (!done) throw AuthorizationError("annotator '" + annotator + "' has no task for review '" + review_id + "'");
    if (tasks_[*done].label == label) return;
    throw ConflictError("review '" + review_id + "' was already labeled " +
                        std::string(label_token(*tasks_[*done].label)) + " by '" + annotator + "'");
  }
  const TaskKind kind = tasks_[*pending].kind;

  nlohmann::ordered_json submitted;
  submitted["type"] = "label-submitted";
  submitted["review_id"] = review_id;
  submitted["annotator"] = annotator;
  submitted["label"] = std::string(label_token(label));
  submitted["at"] = clock_();
  emit(std::move(submitted));

  auto adjudicate = [&](Label final_label, Resolution how) {
    nlohmann::ordered_json e;
    e["type"] = "adjudicated";
    e["review_id"] = review_id;
    e["final"] = std::string(label_token(final_label));
    e["resolved_by"] = std::string(to_string(how));
    emit(std::move(e));
  };

  if (kind == TaskKind::tiebreak) {
    adjudicate(label, Resolution::tiebreak);
  } else {
    std::vector<Label> labels;
    std::set<std::string> raters;
    bool complete = true;
    for (auto idx : tasks_by_review_[review_id]) {
      const auto& t = tasks_[idx];
      if (t.kind != TaskKind::first_pass) continue;
      raters.insert(t.assigned_to);
      if (t.label) {
        labels.push_back(*t.label);
      } else {
        complete = false;
      }
    }
    if (complete) {
      const bool unanimous = std::all_of(labels.begin(), labels.end(), [&](Label l) { return l == labels.front(); });
      if (unanimous) {
        adjudicate(labels.front(), Resolution::agreement);
      } else {
        // Least-loaded eligible annotator, ties by annotator order.
        std::map<std::string, std::size_t> load;
        for (const auto& t : tasks_) ++load[t.assigned_to];
        std::optional<std::string> pick;
        for (const auto& a : spec_.annotators) {
          if (raters.contains(a)) continue;
          if (!pick || load[a] < load[*pick]) pick = a;
        }
        nlohmann::ordered_json e;
        e["type"] = "task-created";
        e["review_id"] = review_id;
        e["annotator"] = *pick;
        e["kind"] = "tiebreak";
        emit(std::move(e));
      }
    }
  }
  write_snapshot();
}

std::vector<Review> AnnotationProject::reviews() const {
  std::shared_lock lock(*mu_);
  std::vector<Review> out;
  for (const auto& id : review_order_) out.push_back(reviews_.at(id));
  return out;
}

std::optional<Review> AnnotationProject::review(const std::string& id) const {
  std::shared_lock lock(*mu_);
  auto it = reviews_.find(id);
  if (it == reviews_.end()) return std::nullopt;
  return it->second;
}

std::vector<AnnotationTask> AnnotationProject::tasks() const {
  std::shared_lock lock(*mu_);
  return tasks_;
}

std::vector<AnnotationTask> AnnotationProject::tasks_for(const std::string& annotator) const {
  std::shared_lock lock(*mu_);
  std::vector<AnnotationTask> out;
  for (const auto& t : tasks_) {
    if (t.assigned_to == annotator) out.push_back(t);
  }
  return out;
}

std::vector<AnnotationTask> AnnotationProject::tasks_of_review(const std::string& review_id) const {
  std::shared_lock lock(*mu_);
  std::vector<AnnotationTask> out;
  if (auto it = tasks_by_review_.find(review_id); it != tasks_by_review_.end()) {
    for (auto idx : it->second) out.push_back(tasks_[idx]);
  }
  return out;
}

std::map<std::string, Adjudication> AnnotationProject::adjudications() const {
  std::shared_lock lock(*mu_);
  return adjudications_;
}

std::vector<std::string> AnnotationProject::open_disagreements() const {
  std::shared_lock lock(*mu_);
  std::vector<std::string> out;
  for (const auto& [id, indices] : tasks_by_review_) {
    if (adjudications_.contains(id)) continue;
    const bool has_tiebreak =
        std::any_of(indices.begin(), indices.end(), [&](auto idx) { return tasks_[idx].kind == TaskKind::tiebreak; });
    if (has_tiebreak) out.push_back(id);
  }
  return out;
}

std::vector<std::string> AnnotationProject::unresolved_locked() const {
  std::vector<std::string> out;
  for (const auto& [id, review] : reviews_) {
    if (!adjudications_.contains(id)) out.push_back(id);
  }
  return out;
}

std::vector<std::string> AnnotationProject::unresolved() const {
  std::shared_lock lock(*mu_);
  return unresolved_locked();
}

std::optional<AgreementStats> AnnotationProject::agreement_locked() const {
  std::vector<int> a, b;
  for (const auto& [id, indices] : tasks_by_review_) {
    std::vector<Label> labels;
    for (auto idx : indices) {
      const auto& t = tasks_[idx];
      if (t.kind == TaskKind::first_pass && t.label) labels.push_back(*t.label);
    }
    if (labels.size() < 2) continue;
    a.push_back(static_cast<int>(labels[0]));
    b.push_back(static_cast<int>(labels[1]));
  }
  if (a.empty()) return std::nullopt;
  return cohens_kappa(a, b);
}

std::optional<AgreementStats> AnnotationProject::agreement() const {
  std::shared_lock lock(*mu_);
  return agreement_locked();
}

std::size_t AnnotationProject::completed_pairs() const {
  std::shared_lock lock(*mu_);
  std::size_t n = 0;
  for (const auto& [id, indices] : tasks_by_review_) {
    const auto labeled = std::count_if(indices.begin(), indices.end(), [&](auto idx) {
      return tasks_[idx].kind == TaskKind::first_pass && tasks_[idx].label.has_value();
    });
    n += labeled >= 2;
  }
  return n;
}

Corpus AnnotationProject::export_ground_truth() const {
  std::shared_lock lock(*mu_);
  if (auto open = unresolved_locked(); !open.empty()) {
    throw ValidationError("cannot export: " + std::to_string(open.size()) + " unresolved review(s): " +
                          join_limited(open));
  }
  std::vector<Review> out;
  for (const auto& [id, review] : reviews_) {
    auto r = review;
    r.label = adjudications_.at(id).final_label;
    out.push_back(std::move(r));
  }
  return Corpus(spec_.name + "-ground-truth", std::move(out), spec_.source);
}

nlohmann::ordered_json AnnotationProject::snapshot() const {
  std::shared_lock lock(*mu_);
  return snapshot_locked();
}

nlohmann::ordered_json AnnotationProject::snapshot_locked() const {
  nlohmann::ordered_json j;
  j["name"] = spec_.name;
  j["annotators"] = spec_.annotators;
  j["coverage"] = spec_.coverage;
  j["lead"] = spec_.lead ? nlohmann::ordered_json(*spec_.lead) : nlohmann::ordered_json();
  j["tiebreakers"] = spec_.tiebreakers;
  j["seed"] = spec_.seed;
  j["source"] = spec_.source;
  j["events"] = events_;
  j["reviews"] = review_order_;
  auto& tasks = j["tasks"] = nlohmann::ordered_json::array();
  for (const auto& t : tasks_) tasks.push_back(task_json(t));
  auto& adj = j["adjudications"] = nlohmann::ordered_json::array();
  for (const auto& [id, a] : adjudications_) {
    nlohmann::ordered_json e;
    e["review_id"] = id;
    auto& first = e["first_labels"] = nlohmann::ordered_json::array();
    for (auto l : a.first_labels) first.push_back(std::string(label_token(l)));
    e["tiebreak_label"] = a.tiebreak_label ? nlohmann::ordered_json(std::string(label_token(*a.tiebreak_label))) : nlohmann::ordered_json();
    e["final_label"] = std::string(label_token(a.final_label));
    e["resolved_by"] = std::string(to_string(a.resolved_by));
    adj.push_back(std::move(e));
  }
  return j;
}

std::size_t AnnotationProject::event_count() const {
  std::shared_lock lock(*mu_);
  return events_;
}

void AnnotationProject::write_snapshot() const {
  if (dir_.empty()) return;
  // Caller holds the write lock.
  write_file_atomic(dir_ / kSnapshotFile, snapshot_locked().dump(2) + "\n");
}

std::map<std::string, std::string> load_tokens(const std::filesystem::path& path) {
  auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ValidationError("'" + path.string() + "' must be a JSON object");
  std::map<std::string, std::string> by_token;
  for (const auto& [annotator, token] : j.items()) {
    if (!token.is_string() || token.get<std::string>().empty()) {
      throw ValidationError("token for '" + annotator + "' must be a non-empty string");
    }
    if (!by_token.emplace(token.get<std::string>(), annotator).second) {
      throw ValidationError("token for '" + annotator + "' is shared with another annotator");
    }
  }
  return by_token;
}

}  // namespace cmer
