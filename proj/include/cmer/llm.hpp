#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmer/heuristics.hpp"
#include "cmer/record_log.hpp"
#include "cmer/retry.hpp"

namespace cmer {

enum class Role { system, user };

std::string_view to_string(Role r);

struct ChatMessage {
  Role role = Role::user;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

/// Role-based zero-shot prompt. `system_text` may reference {input_format},
/// {task} and {output_format}; `user_text` must contain `"""{review}"""`
/// exactly once.
struct PromptTemplate {
  std::string version;
  std::string system_text;
  std::string input_format;
  std::string task;
  std::string output_format;
  std::string user_text;

  /// Throws ValidationError for unknown, empty or unfilled placeholders, a
  /// user text without the delimited {review} slot, or an output format
  /// that does not name both "yes" and "no".
  void validate() const;

  friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;
};

const PromptTemplate& default_template();
PromptTemplate template_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const PromptTemplate& t);
/// "default" selects default_template(); anything else is a template file.
PromptTemplate load_template(std::string_view path_or_default);

/// Escapes backslashes, and double quotes that belong to a run of three or
/// more or touch either end of the text, so the result can sit between
/// triple-quote delimiters unambiguously.
std::string escape_review(std::string_view text);
std::string unescape_review(std::string_view escaped);

/// [system, user]. Only the review text reaches the model.
std::vector<ChatMessage> render_prompt(const PromptTemplate& t, std::string_view review_text);
/// Recovers the review text from a rendered user message.
std::string extract_review(const PromptTemplate& t, std::string_view user_message);

enum class Verdict { yes, no };
enum class ParsedVerdict { yes, no, unparseable };

std::string_view to_string(Verdict v);
std::string_view to_string(ParsedVerdict v);

/// Case-insensitive "yes"/"no" as the leading word of the response
/// (surrounding punctuation and quoting tolerated); a response that also
/// contains the opposite word, or that leads with anything else, is
/// unparseable.
ParsedVerdict parse_verdict(std::string_view raw);

/// Strict majority of yes over no (or no over yes) among the parsed samples,
/// unparseable ones excluded. nullopt on a tie.
std::optional<Verdict> majority_verdict(std::span<const ParsedVerdict> parsed);

/// Chat-completions backend. Implementations must be safe to call concurrently.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  [[nodiscard]] virtual std::string model_id() const = 0;
  /// Raw assistant content. Throws BackendError.
  virtual std::string complete(const std::vector<ChatMessage>& messages, double temperature) = 0;
};

struct MockChatRule {
  std::string keyword;                 // case-insensitive substring of the user message
  std::vector<std::string> responses;  // cycled per distinct prompt
};

struct MockChatRules {
  std::string model_id = "mock-chat";
  std::vector<std::string> default_responses{"no"};
  std::vector<MockChatRule> rules;  // first match wins
};

MockChatRules mock_chat_rules_from_json(const nlohmann::json& j);
MockChatRules load_mock_chat_rules(const std::filesystem::path& path);

/// The n-th request carrying a given prompt receives responses[n % size].
class MockChatBackend final : public ChatBackend {
 public:
  explicit MockChatBackend(MockChatRules rules);

  [[nodiscard]] std::string model_id() const override { return rules_.model_id; }
  std::string complete(const std::vector<ChatMessage>& messages, double temperature) override;
  [[nodiscard]] std::size_t calls() const noexcept { return calls_.load(); }

 private:
  MockChatRules rules_;
  std::atomic<std::size_t> calls_{0};
  std::mutex mu_;
  std::map<std::string, std::size_t> per_prompt_;
};

/// Client for POST {base_url}/v1/chat/completions.
class HttpChatBackend final : public ChatBackend {
 public:
  HttpChatBackend(std::string base_url, std::string model, std::string api_key,
                  std::chrono::milliseconds timeout = std::chrono::seconds(60));

  [[nodiscard]] std::string model_id() const override { return model_; }
  std::string complete(const std::vector<ChatMessage>& messages, double temperature) override;

 private:
  std::string base_url_;
  std::string model_;
  std::string api_key_;
  std::chrono::milliseconds timeout_;
};

struct VoteRecord {
  std::string review_id;
  std::vector<std::string> samples;  // raw responses, k or 2k
  std::vector<ParsedVerdict> parsed;
  std::optional<Verdict> verdict;    // nullopt: classification failed
  bool resampled = false;
  std::optional<Label> truth;

  friend bool operator==(const VoteRecord&, const VoteRecord&) = default;
};

struct ClassifiedCorpus {
  std::string model_id;
  std::string prompt_version;
  int k = 5;
  double temperature = 0.0;
  std::map<std::string, VoteRecord> records;  // by review id

  [[nodiscard]] std::size_t count(Verdict v) const;
  [[nodiscard]] std::size_t failed() const;
  [[nodiscard]] std::vector<std::string> ids_with(Verdict v) const;

  friend bool operator==(const ClassifiedCorpus&, const ClassifiedCorpus&) = default;
};

std::string to_jsonl(const ClassifiedCorpus& c);
ClassifiedCorpus classified_from_jsonl(std::string_view text);
ClassifiedCorpus load_classified(const std::filesystem::path& path);

/// Raw responses keyed by (model, temperature, prompt hash, sample index).
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(const std::filesystem::path& log_path) : log_(log_path) {}

  static std::string key(std::string_view model_id, double temperature, const std::vector<ChatMessage>& messages,
                         std::size_t sample_index);

  [[nodiscard]] std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, const std::string& response) { log_.put(key, response); }
  [[nodiscard]] std::size_t size() const { return log_.size(); }

 private:
  RecordLog log_;
};

struct ClassifyOptions {
  int k = 5;                 // odd, >= 1
  double temperature = 0.0;  // >= 0
  std::size_t max_in_flight = 4;
  RetryPolicy retry;
  Sleeper sleeper = real_sleeper();
};

struct ClassifyStats {
  std::size_t reviews = 0;
  std::size_t requests = 0;  // samples needed
  std::size_t cache_hits = 0;
  std::size_t backend_calls = 0;  // retries included
  std::size_t resampled = 0;
};

/// Classifies the maybe-psr records of `pseudo` with k independent samples
/// each. Without a strict majority the review is re-sampled once (k more)
/// and decided over all 2k samples; a remaining tie is recorded as failed.
/// Reviews exhausting their retries raise a PipelineError listing the
/// unclassified ids after all others finish.
ClassifiedCorpus classify(const PseudoLabeledCorpus& pseudo, ChatBackend& backend, const PromptTemplate& tmpl,
                          const ClassifyOptions& options = {}, ResponseCache* cache = nullptr,
                          ClassifyStats* stats = nullptr);

}  // namespace cmer
