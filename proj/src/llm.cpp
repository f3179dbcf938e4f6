#include "cmer/llm.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <exception>
#include <thread>

#include "cmer/error.hpp"
#include "cmer/http.hpp"
#include "cmer/util.hpp"

namespace cmer {

std::string_view to_string(Role r) { return r == Role::system ? "system" : "user"; }

std::string_view to_string(Verdict v) { return v == Verdict::yes ? "yes" : "no"; }

std::string_view to_string(ParsedVerdict v) {
  switch (v) {
    case ParsedVerdict::yes:
      return "yes";
    case ParsedVerdict::no:
      return "no";
    case ParsedVerdict::unparseable:
      break;
  }
  return "unparseable";
}

// ---------------------------------------------------------------------------
// Template

namespace {

constexpr std::string_view kReviewSlot = "\"\"\"{review}\"\"\"";

struct Placeholder {
  std::size_t begin;
  std::size_t end;  // one past '}'
  std::string name;
};

std::vector<Placeholder> find_placeholders(std::string_view text) {
  std::vector<Placeholder> out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '{') continue;
    const auto close = text.find('}', i);
    if (close == std::string_view::npos) break;
    auto name = text.substr(i + 1, close - i - 1);
    const bool identifier = std::all_of(name.begin(), name.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
    });
    if (identifier) out.push_back({i, close + 1, std::string(name)});
    i = close;
  }
  return out;
}

bool contains_word(std::string_view text, std::string_view word) {
  const auto lowered = ascii_lower(text);
  for (std::size_t pos = lowered.find(word); pos != std::string::npos; pos = lowered.find(word, pos + 1)) {
    const bool left = pos == 0 || !std::isalpha(static_cast<unsigned char>(lowered[pos - 1]));
    const auto after = pos + word.size();
    const bool right = after >= lowered.size() || !std::isalpha(static_cast<unsigned char>(lowered[after]));
    if (left && right) return true;
  }
  return false;
}

std::string render_system(const PromptTemplate& t) {
  std::string out;
  std::size_t last = 0;
  for (const auto& p : find_placeholders(t.system_text)) {
    out += t.system_text.substr(last, p.begin - last);
    if (p.name == "input_format") {
      out += t.input_format;
    } else if (p.name == "task") {
      out += t.task;
    } else if (p.name == "output_format") {
      out += t.output_format;
    }
    last = p.end;
  }
  out += t.system_text.substr(last);
  return out;
}

}  // namespace

void PromptTemplate::validate() const {
  const auto where = "prompt template '" + version + "'";
  if (trim(version).empty()) throw ValidationError("prompt template has an empty version");
  if (system_text.find("{}") != std::string::npos || user_text.find("{}") != std::string::npos) {
    throw ValidationError(where + ": empty placeholder '{}'");
  }
  for (const auto& p : find_placeholders(system_text)) {
    const std::string* value = nullptr;
    if (p.name == "input_format") {
      value = &input_format;
    } else if (p.name == "task") {
      value = &task;
    } else if (p.name == "output_format") {
      value = &output_format;
    } else {
      throw ValidationError(where + ": unknown placeholder {" + p.name + "} in system text");
    }
    if (trim(*value).empty()) throw ValidationError(where + ": placeholder {" + p.name + "} has an empty value");
  }
  const auto rendered = render_system(*this);
  if (trim(rendered).empty()) throw ValidationError(where + ": system text is empty");
  if (!contains_word(rendered, "yes") || !contains_word(rendered, "no")) {
    throw ValidationError(where + ": system message must state the permitted outputs \"yes\" and \"no\"");
  }
  auto user_ph = find_placeholders(user_text);
  if (user_ph.size() != 1 || user_ph.front().name != "review") {
    throw ValidationError(where + ": user text must contain exactly one {review} placeholder and no others");
  }
  if (user_text.find(kReviewSlot) == std::string::npos) {
    throw ValidationError(where + ": {review} must be wrapped in triple-quote delimiters");
  }
}

const PromptTemplate& default_template() {
  static const PromptTemplate t = [] {
    PromptTemplate p;
    p.version = "role-zero-shot-v1";
    p.system_text =
        "You are an expert analyst of mobile app reviews.\n"
        "Input format: each message contains one app review written as\n"
        "{input_format}\n\n"
        "Task: {task}\n\n"
        "Output format: {output_format}";
    p.input_format = "App Review: \"\"\"content of the app review\"\"\"";
    p.task =
        "Decide whether the app review is related to privacy or security, for example concerns about how "
        "personal or financial data is collected, stored, shared or protected, or about unauthorized access "
        "to the user's account or money.";
    p.output_format =
        "Return just the label: \"yes\" if the review is related to privacy or security, or \"no\" if it is "
        "not. Do not add any explanation.";
    p.user_text = "App Review: \"\"\"{review}\"\"\"";
    p.validate();
    return p;
  }();
  return t;
}

PromptTemplate template_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("prompt template must be a JSON object");
  auto field = [&](const char* key) {
    auto it = j.find(key);
    if (it == j.end()) return std::string{};
    if (!it->is_string()) throw ValidationError(std::string("template field '") + key + "' must be a string");
    return it->get<std::string>();
  };
  PromptTemplate t{field("version"), field("system"), field("input_format"),
                   field("task"),    field("output_format"), field("user")};
  t.validate();
  return t;
}

nlohmann::ordered_json to_json(const PromptTemplate& t) {
  nlohmann::ordered_json j;
  j["version"] = t.version;
  j["system"] = t.system_text;
  j["input_format"] = t.input_format;
  j["task"] = t.task;
  j["output_format"] = t.output_format;
  j["user"] = t.user_text;
  return j;
}

PromptTemplate load_template(std::string_view path_or_default) {
  if (path_or_default == "default") return default_template();
  auto j = nlohmann::json::parse(read_file(std::string(path_or_default)), nullptr, false);
  if (j.is_discarded()) throw ValidationError("template '" + std::string(path_or_default) + "' is not valid JSON");
  return template_from_json(j);
}

std::string escape_review(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\\') {
      out += "\\\\";
      continue;
    }
    if (c != '"') {
      out.push_back(c);
      continue;
    }
    std::size_t run_begin = i;
    while (run_begin > 0 && text[run_begin - 1] == '"') --run_begin;
    std::size_t run_end = i;
    while (run_end < text.size() && text[run_end] == '"') ++run_end;
    const bool escape = (run_end - run_begin) >= 3 || i == 0 || i + 1 == text.size();
    if (escape) out.push_back('\\');
    out.push_back('"');
  }
  return out;
}

std::string unescape_review(std::string_view escaped) {
  std::string out;
  out.reserve(escaped.size());
  for (std::size_t i = 0; i < escaped.size(); ++i) {
    if (escaped[i] == '\\' && i + 1 < escaped.size() && (escaped[i + 1] == '\\' || escaped[i + 1] == '"')) {
      out.push_back(escaped[++i]);
    } else {
      out.push_back(escaped[i]);
    }
  }
  return out;
}

std::vector<ChatMessage> render_prompt(const PromptTemplate& t, std::string_view review_text) {
  std::string user = t.user_text;
  const auto pos = user.find("{review}");
  user.replace(pos, std::string_view("{review}").size(), escape_review(review_text));
  return {{Role::system, render_system(t)}, {Role::user, std::move(user)}};
}

std::string extract_review(const PromptTemplate& t, std::string_view user_message) {
  const auto pos = t.user_text.find("{review}");
  const std::string_view prefix = std::string_view(t.user_text).substr(0, pos);
  const std::string_view suffix = std::string_view(t.user_text).substr(pos + std::string_view("{review}").size());
  if (!user_message.starts_with(prefix) || !user_message.ends_with(suffix) ||
      user_message.size() < prefix.size() + suffix.size()) {
    throw ValidationError("message does not match the template's user text");
  }
  return unescape_review(user_message.substr(prefix.size(), user_message.size() - prefix.size() - suffix.size()));
}

// ---------------------------------------------------------------------------
// Verdicts

ParsedVerdict parse_verdict(std::string_view raw) {
  std::vector<std::string> words;
  std::string current;
  for (char c : raw) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  if (words.empty()) return ParsedVerdict::unparseable;

  // Only quoting/markup may precede the leading word.
  const auto first_alpha = std::find_if(raw.begin(), raw.end(), [](char c) { return std::isalpha(static_cast<unsigned char>(c)); });
  for (auto it = raw.begin(); it != first_alpha; ++it) {
    const char c = *it;
    if (!(std::isspace(static_cast<unsigned char>(c)) || c == '"' || c == '\'' || c == '*' || c == '`' || c == '(' ||
          c == '[' || c == '_')) {
      return ParsedVerdict::unparseable;
    }
  }

  const auto& lead = words.front();
  if (lead != "yes" && lead != "no") return ParsedVerdict::unparseable;
  const std::string opposite = lead == "yes" ? "no" : "yes";
  if (std::find(words.begin() + 1, words.end(), opposite) != words.end()) return ParsedVerdict::unparseable;
  return lead == "yes" ? ParsedVerdict::yes : ParsedVerdict::no;
}

std::optional<Verdict> majority_verdict(std::span<const ParsedVerdict> parsed) {
  const auto yes = std::count(parsed.begin(), parsed.end(), ParsedVerdict::yes);
  const auto no = std::count(parsed.begin(), parsed.end(), ParsedVerdict::no);
  if (yes > no) return Verdict::yes;
  if (no > yes) return Verdict::no;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Backends

MockChatRules mock_chat_rules_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("mock chat rules must be a JSON object");
  auto responses = [](const nlohmann::json& v, const std::string& where) {
    std::vector<std::string> out;
    if (v.is_string()) {
      out.push_back(v.get<std::string>());
    } else if (v.is_array()) {
      for (const auto& e : v) out.push_back(e.get<std::string>());
    }
    if (out.empty()) throw ValidationError(where + ": response must be a string or non-empty string array");
    return out;
  };
  MockChatRules rules;
  if (auto it = j.find("model"); it != j.end()) rules.model_id = it->get<std::string>();
  if (auto it = j.find("default"); it != j.end()) rules.default_responses = responses(*it, "mock chat default");
  if (auto it = j.find("rules"); it != j.end()) {
    for (const auto& r : *it) {
      MockChatRule rule{r.at("keyword").get<std::string>(), responses(r.at("response"), "mock chat rule")};
      if (rule.keyword.empty()) throw ValidationError("mock chat rule with empty keyword");
      rules.rules.push_back(std::move(rule));
    }
  }
  return rules;
}

MockChatRules load_mock_chat_rules(const std::filesystem::path& path) {
  auto j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw ValidationError("'" + path.string() + "' is not valid JSON");
  return mock_chat_rules_from_json(j);
}

MockChatBackend::MockChatBackend(MockChatRules rules) : rules_(std::move(rules)) {}

std::string MockChatBackend::complete(const std::vector<ChatMessage>& messages, double /*temperature*/) {
  ++calls_;
  std::string user;
  for (const auto& m : messages) {
    if (m.role == Role::user) user += m.content;
  }
  const auto lowered = ascii_lower(user);
  const std::vector<std::string>* responses = &rules_.default_responses;
  for (const auto& rule : rules_.rules) {
    if (lowered.find(ascii_lower(rule.keyword)) != std::string::npos) {
      responses = &rule.responses;
      break;
    }
  }
  std::size_t n = 0;
  {
    std::lock_guard lock(mu_);
    n = per_prompt_[user]++;
  }
  return (*responses)[n % responses->size()];
}

HttpChatBackend::HttpChatBackend(std::string base_url, std::string model, std::string api_key,
                                 std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)), model_(std::move(model)), api_key_(std::move(api_key)), timeout_(timeout) {}

std::string HttpChatBackend::complete(const std::vector<ChatMessage>& messages, double temperature) {
  nlohmann::json body;
  body["model"] = model_;
  body["temperature"] = temperature;
  auto& arr = body["messages"] = nlohmann::json::array();
  for (const auto& m : messages) arr.push_back({{"role", std::string(to_string(m.role))}, {"content", m.content}});
  std::map<std::string, std::string> headers;
  if (!api_key_.empty()) headers["Authorization"] = "Bearer " + api_key_;
  const auto response = post_json(base_url_, "/v1/chat/completions", body, headers, timeout_);
  try {
    return response.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw BackendError("chat response lacks choices[0].message.content", 200, false);
  }
}

// ---------------------------------------------------------------------------
// Classified corpus

std::size_t ClassifiedCorpus::count(Verdict v) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& kv) { return kv.second.verdict == v; }));
}

std::size_t ClassifiedCorpus::failed() const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const auto& kv) { return !kv.second.verdict; }));
}

std::vector<std::string> ClassifiedCorpus::ids_with(Verdict v) const {
  std::vector<std::string> out;
  for (const auto& [id, rec] : records) {
    if (rec.verdict == v) out.push_back(id);
  }
  return out;
}

namespace {

ParsedVerdict parsed_from_string(std::string_view s) {
  if (s == "yes") return ParsedVerdict::yes;
  if (s == "no") return ParsedVerdict::no;
  if (s == "unparseable") return ParsedVerdict::unparseable;
  throw ValidationError("unknown parsed verdict '" + std::string(s) + "'");
}

}  // namespace

std::string to_jsonl(const ClassifiedCorpus& c) {
  nlohmann::ordered_json header;
  header["model_id"] = c.model_id;
  header["prompt_version"] = c.prompt_version;
  header["k"] = c.k;
  header["temperature"] = c.temperature;
  std::string out = header.dump() + "\n";
  for (const auto& [id, rec] : c.records) {
    nlohmann::ordered_json line;
    line["id"] = id;
    line["verdict"] = rec.verdict ? nlohmann::ordered_json(std::string(to_string(*rec.verdict))) : nlohmann::ordered_json();
    line["samples"] = rec.samples;
    auto& parsed = line["parsed"] = nlohmann::ordered_json::array();
    for (auto p : rec.parsed) parsed.push_back(std::string(to_string(p)));
    line["resampled"] = rec.resampled;
    if (rec.truth) line["truth"] = static_cast<int>(*rec.truth);
    out += line.dump();
    out += '\n';
  }
  return out;
}

ClassifiedCorpus classified_from_jsonl(std::string_view text) {
  ClassifiedCorpus c;
  bool have_header = false;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw ValidationError("classified line " + std::to_string(line_no) + " is not a JSON object");
    }
    if (!have_header) {
      c.model_id = j.at("model_id").get<std::string>();
      c.prompt_version = j.at("prompt_version").get<std::string>();
      c.k = j.at("k").get<int>();
      c.temperature = j.at("temperature").get<double>();
      have_header = true;
      continue;
    }
    VoteRecord rec;
    rec.review_id = j.at("id").get<std::string>();
    rec.samples = j.at("samples").get<std::vector<std::string>>();
    for (const auto& p : j.at("parsed")) rec.parsed.push_back(parsed_from_string(p.get<std::string>()));
    if (const auto& v = j.at("verdict"); !v.is_null()) {
      const auto s = v.get<std::string>();
      if (s != "yes" && s != "no") throw ValidationError("verdict must be yes, no or null");
      rec.verdict = s == "yes" ? Verdict::yes : Verdict::no;
    }
    rec.resampled = j.value("resampled", false);
    if (j.contains("truth")) rec.truth = static_cast<Label>(j["truth"].get<int>());
    auto id = rec.review_id;
    if (!c.records.emplace(id, std::move(rec)).second) throw ValidationError("classified file repeats id '" + id + "'");
  }
  if (!have_header) throw ValidationError("classified file is empty");
  return c;
}

ClassifiedCorpus load_classified(const std::filesystem::path& path) { return classified_from_jsonl(read_file(path)); }

std::string ResponseCache::key(std::string_view model_id, double temperature, const std::vector<ChatMessage>& messages,
                               std::size_t sample_index) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : messages) arr.push_back({std::string(to_string(m.role)), m.content});
  char temp[32];
  std::snprintf(temp, sizeof temp, "%.6g", temperature);
  return std::string(model_id) + "|" + temp + "|" + sha256_hex(arr.dump()) + "|" + std::to_string(sample_index);
}

std::optional<std::string> ResponseCache::get(const std::string& key) const {
  auto v = log_.get(key);
  if (!v || !v->is_string()) return std::nullopt;
  return v->get<std::string>();
}

// ---------------------------------------------------------------------------
// Classification

ClassifiedCorpus classify(const PseudoLabeledCorpus& pseudo, ChatBackend& backend, const PromptTemplate& tmpl,
                          const ClassifyOptions& options, ResponseCache* cache, ClassifyStats* stats) {
  if (options.k < 1 || options.k % 2 == 0) throw ValidationError("k must be odd and >= 1");
  if (!(options.temperature >= 0.0)) throw ValidationError("temperature must be >= 0");
  if (options.max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
  tmpl.validate();

  struct Item {
    const std::string* id;
    const PseudoRecord* rec;
  };
  std::vector<Item> items;
  for (const auto& [id, rec] : pseudo.records) {
    if (rec.label != PseudoLabel::maybe_psr) continue;
    if (rec.text.empty()) throw ValidationError("maybe-psr record '" + id + "' carries no review text");
    items.push_back({&id, &rec});
  }

  const auto model = backend.model_id();
  std::vector<std::optional<VoteRecord>> results(items.size());
  std::atomic<std::size_t> next{0}, calls{0}, requests{0}, hits{0}, resampled{0};
  std::atomic<bool> abort{false};
  std::mutex err_mu;
  std::exception_ptr fatal;
  std::vector<std::string> unclassified;

  auto sample = [&](const std::vector<ChatMessage>& messages, std::size_t index) {
    ++requests;
    std::string key;
    if (cache) {
      key = ResponseCache::key(model, options.temperature, messages, index);
      if (auto hit = cache->get(key)) {
        ++hits;
        return *hit;
      }
    }
    auto response = with_retry(
        options.retry,
        [&] {
          ++calls;
          return backend.complete(messages, options.temperature);
        },
        options.sleeper);
    if (cache) cache->put(key, response);
    return response;
  };

  auto worker = [&] {
    while (!abort.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      const auto& item = items[i];
      try {
        const auto messages = render_prompt(tmpl, item.rec->text);
        VoteRecord vote;
        vote.review_id = *item.id;
        vote.truth = item.rec->truth;
        const auto k = static_cast<std::size_t>(options.k);
        auto draw = [&](std::size_t from, std::size_t to) {
          for (std::size_t s = from; s < to; ++s) {
            vote.samples.push_back(sample(messages, s));
            vote.parsed.push_back(parse_verdict(vote.samples.back()));
          }
        };
        draw(0, k);
        vote.verdict = majority_verdict(vote.parsed);
        if (!vote.verdict) {
          vote.resampled = true;
          ++resampled;
          draw(k, 2 * k);
          vote.verdict = majority_verdict(vote.parsed);
        }
        results[i] = std::move(vote);
      } catch (const BackendError& e) {
        std::lock_guard lock(err_mu);
        if (e.retryable()) {
          unclassified.push_back(*item.id);
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

  const std::size_t n_workers = std::min(options.max_in_flight, items.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);
  }

  if (stats) {
    stats->reviews = items.size();
    stats->requests = requests.load();
    stats->cache_hits = hits.load();
    stats->backend_calls = calls.load();
    stats->resampled = resampled.load();
  }
  if (fatal) std::rethrow_exception(fatal);
  if (!unclassified.empty()) {
    std::sort(unclassified.begin(), unclassified.end());
    throw PipelineError("chat backend unreachable after retries; unclassified reviews: " + join_limited(unclassified),
                        std::move(unclassified));
  }

  ClassifiedCorpus out;
  out.model_id = model;
  out.prompt_version = tmpl.version;
  out.k = options.k;
  out.temperature = options.temperature;
  for (auto& r : results) {
    auto id = r->review_id;
    out.records.emplace(std::move(id), std::move(*r));
  }
  return out;
}

}  // namespace cmer
