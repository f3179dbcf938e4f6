#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmer/corpus.hpp"
#include "cmer/evaluation.hpp"
#include "cmer/llm.hpp"

namespace cmer {

enum class TaskKind { first_pass, tiebreak };
enum class TaskStatus { pending, labeled };
enum class Resolution { agreement, tiebreak };

std::string_view to_string(TaskKind k);
std::string_view to_string(Resolution r);
std::string_view label_token(Label l);  // "psr" / "non_psr"
Label parse_label_token(std::string_view s);

struct AnnotationTask {
  std::string review_id;
  std::string assigned_to;
  TaskKind kind = TaskKind::first_pass;
  TaskStatus status = TaskStatus::pending;
  std::optional<Label> label;
  std::string labeled_at;

  friend bool operator==(const AnnotationTask&, const AnnotationTask&) = default;
};

struct Adjudication {
  std::string review_id;
  std::vector<Label> first_labels;  // first-pass order
  std::optional<Label> tiebreak_label;
  Label final_label = Label::non_psr;
  Resolution resolved_by = Resolution::agreement;

  friend bool operator==(const Adjudication&, const Adjudication&) = default;
};

struct ProjectSpec {
  std::string name;
  std::vector<std::string> annotators;
  std::string guideline_text;
  int coverage = 2;
  std::optional<std::string> lead;  // receives every review as a first-pass rater
  std::vector<std::string> tiebreakers;  // receive no first-pass tasks
  std::uint32_t seed = 0;
  std::string source;  // provenance of the candidate set

  /// Throws ValidationError: empty name, duplicate or empty annotator ids,
  /// coverage < 2, fewer than coverage + 1 annotators, unknown lead or
  /// tie-breaker, or fewer first-pass annotators than coverage.
  void validate() const;
};

/// Reviews with a yes verdict in `classified`, taken from `corpus`. Throws
/// ValidationError for classified ids missing from the corpus.
std::vector<Review> yes_candidates(const ClassifiedCorpus& classified, const Corpus& corpus);

/// A manual-inspection project. All state changes are events appended to
/// events.jsonl in the project directory; replaying the log rebuilds the
/// project exactly. snapshot.json is rewritten after every change as a
/// read-only index for external tools.
class AnnotationProject {
 public:
  using Clock = std::function<std::string()>;

  /// Creates an in-memory project, or a persistent one when `dir` is
  /// non-empty (the directory must not already hold a project). First-pass
  /// tasks are assigned round-robin over a seeded shuffle of the
  /// candidates, so the same spec and candidates give the same tasks.
  static AnnotationProject create(const ProjectSpec& spec, const std::vector<Review>& candidates,
                                  const std::filesystem::path& dir = {}, Clock clock = {});
  /// Replays `dir`/events.jsonl. A torn final line is dropped from the log.
  static AnnotationProject open(const std::filesystem::path& dir, Clock clock = {});

  AnnotationProject(AnnotationProject&&) noexcept;
  AnnotationProject& operator=(AnnotationProject&&) noexcept;
  ~AnnotationProject();

  /// Records `annotator`'s label for `review_id`. Throws NotFoundError for
  /// an unknown review, AuthorizationError when the annotator holds no task
  /// for it, ConflictError when the task already carries a different label
  /// (the same label again is a no-op).
  void submit_label(const std::string& annotator, const std::string& review_id, Label label);

  [[nodiscard]] const ProjectSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] std::vector<Review> reviews() const;
  [[nodiscard]] std::optional<Review> review(const std::string& id) const;
  [[nodiscard]] std::vector<AnnotationTask> tasks() const;
  [[nodiscard]] std::vector<AnnotationTask> tasks_for(const std::string& annotator) const;
  [[nodiscard]] std::vector<AnnotationTask> tasks_of_review(const std::string& review_id) const;
  [[nodiscard]] std::map<std::string, Adjudication> adjudications() const;
  /// Reviews whose first-pass labels disagree and await a tie-break.
  [[nodiscard]] std::vector<std::string> open_disagreements() const;
  [[nodiscard]] std::vector<std::string> unresolved() const;

  /// Kappa over the first two first-pass labels of every review where both
  /// are in; nullopt when there are none.
  [[nodiscard]] std::optional<AgreementStats> agreement() const;
  [[nodiscard]] std::size_t completed_pairs() const;

  /// Labeled corpus of every candidate with its final label. Throws
  /// ValidationError listing unresolved ids.
  [[nodiscard]] Corpus export_ground_truth() const;

  /// Full state; equal after replay.
  [[nodiscard]] nlohmann::ordered_json snapshot() const;
  [[nodiscard]] std::size_t event_count() const;

 private:
  AnnotationProject() = default;

  void apply(const nlohmann::json& event);
  void emit(nlohmann::ordered_json event);
  [[nodiscard]] nlohmann::ordered_json snapshot_locked() const;
  void write_snapshot() const;
  [[nodiscard]] std::optional<AgreementStats> agreement_locked() const;
  [[nodiscard]] std::vector<std::string> unresolved_locked() const;

  ProjectSpec spec_;
  std::map<std::string, Review> reviews_;
  std::vector<std::string> review_order_;
  std::vector<AnnotationTask> tasks_;
  std::map<std::string, std::vector<std::size_t>> tasks_by_review_;
  std::map<std::string, Adjudication> adjudications_;
  std::size_t events_ = 0;

  std::filesystem::path dir_;
  std::ofstream log_;
  Clock clock_;
  std::unique_ptr<std::shared_mutex> mu_ = std::make_unique<std::shared_mutex>();
};

/// Bearer token -> annotator id, read from {"<annotator>": "<token>", ...}.
std::map<std::string, std::string> load_tokens(const std::filesystem::path& path);

}  // namespace cmer
