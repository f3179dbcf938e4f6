#include "cmer/hypotheses.hpp"

#include <algorithm>
#include <set>

#include "cmer/error.hpp"
#include "cmer/util.hpp"

namespace cmer {

namespace {

// A sentence terminator followed by more text means two sentences.
bool is_single_sentence(std::string_view text) {
  for (std::size_t i = 0; i + 1 < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && text[i + 1] == ' ') {
      auto rest = trim(text.substr(i + 1));
      if (!rest.empty()) return false;
    }
  }
  return true;
}

}  // namespace

HypothesisSet::HypothesisSet(std::string set_id, std::string description, std::vector<Hypothesis> hypotheses)
    : set_id_(std::move(set_id)), description_(std::move(description)), hypotheses_(std::move(hypotheses)) {
  if (trim(set_id_).empty()) throw ValidationError("hypothesis set has an empty set_id");
  if (hypotheses_.empty()) throw ValidationError("hypothesis set '" + set_id_ + "' has zero hypotheses");
  std::set<std::string, std::less<>> seen;
  for (std::size_t i = 0; i < hypotheses_.size(); ++i) {
    const auto& h = hypotheses_[i];
    const auto where = "hypothesis #" + std::to_string(i + 1) + " (id '" + h.id + "')";
    if (trim(h.id).empty()) throw ValidationError("hypothesis #" + std::to_string(i + 1) + " has an empty id");
    if (!seen.insert(h.id).second) throw ValidationError("duplicate hypothesis id '" + h.id + "'");
    if (trim(h.text).empty()) throw ValidationError(where + " has empty text");
    if (!is_single_sentence(h.text)) throw ValidationError(where + " is not a single sentence");
  }
}

const Hypothesis* HypothesisSet::find(std::string_view id) const {
  auto it = std::find_if(hypotheses_.begin(), hypotheses_.end(), [&](const Hypothesis& h) { return h.id == id; });
  return it == hypotheses_.end() ? nullptr : &*it;
}

std::size_t HypothesisSet::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < hypotheses_.size(); ++i) {
    if (hypotheses_[i].id == id) return i;
  }
  throw NotFoundError("hypothesis '" + std::string(id) + "' not in set '" + set_id_ + "'");
}

std::vector<Hypothesis> HypothesisSet::in_category(std::string_view category) const {
  std::vector<Hypothesis> out;
  std::copy_if(hypotheses_.begin(), hypotheses_.end(), std::back_inserter(out),
               [&](const Hypothesis& h) { return h.category == category; });
  return out;
}

std::vector<std::string> HypothesisSet::categories() const {
  std::vector<std::string> out;
  for (const auto& h : hypotheses_) {
    if (std::find(out.begin(), out.end(), h.category) == out.end()) out.push_back(h.category);
  }
  return out;
}

const HypothesisSet& builtin_finance_set() {
  static const HypothesisSet set = [] {
    constexpr std::string_view kHarvest = "Input Harvest";
    constexpr std::string_view kStorage = "Sensitive Data Storage";
    constexpr std::string_view kTransmission = "Sensitive Data Transmission";
    constexpr std::string_view kInfrastructure = "Communication Infrastructure";
    struct Row {
      std::string_view category;
      std::string_view text;
    };
    static constexpr Row kRows[] = {
        {kHarvest, "The user is concerned about how the app harvests their financial data."},
        {kHarvest, "The user is concerned about unauthorized collection of sensitive financial information."},
        {kHarvest, "The app requires excessive permissions to access financial data."},
        {kHarvest, "The app collects financial data without adequate transparency."},
        {kHarvest, "The app collects more financial data than necessary."},
        {kStorage, "Financial data is retained for longer than necessary."},
        {kStorage, "The user is concerned about the security of their stored financial information."},
        {kStorage, "The app stores sensitive financial data without proper encryption."},
        {kStorage,
         "The user is concerned about the processing and storage of financial data against privacy regulations "
         "or policies."},
        {kStorage, "The user is concerned that their financial data is stolen due to hacking."},
        {kTransmission, "The user is concerned about the interception of their financial transactions."},
        {kTransmission, "Financial data is shared with third parties during transmission without consent."},
        {kTransmission, "Sensitive financial data is shared with third parties for marketing or profit."},
        {kTransmission, "Financial information is accessible to internal firm advisors without consent."},
        {kInfrastructure, "Sensitive financial details are shared via insecure channels."},
        {kInfrastructure, "Unauthorized bank transfers are performed."},
        {kInfrastructure, "User device communication patterns reveal private financial information."},
    };
    std::vector<Hypothesis> hs;
    int n = 0;
    for (const auto& row : kRows) {
      ++n;
      std::string id = n < 10 ? "D0" + std::to_string(n) : "D" + std::to_string(n);
      hs.push_back({std::move(id), std::string(row.text), std::string(row.category)});
    }
    return HypothesisSet(std::string(kFinanceSetId),
                         "Finance-domain privacy and security risk hypotheses (17 hypotheses, 4 risk categories)",
                         std::move(hs));
  }();
  return set;
}

nlohmann::ordered_json to_json(const HypothesisSet& set) {
  nlohmann::ordered_json j;
  j["set_id"] = set.set_id();
  j["description"] = set.description();
  auto& arr = j["hypotheses"] = nlohmann::ordered_json::array();
  for (const auto& h : set.hypotheses()) {
    nlohmann::ordered_json e;
    e["id"] = h.id;
    e["category"] = h.category;
    e["text"] = h.text;
    arr.push_back(std::move(e));
  }
  return j;
}

HypothesisSet hypothesis_set_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("hypothesis set file must hold a JSON object");
  auto str = [](const nlohmann::json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) {
      throw ValidationError(where + ": field '" + key + "' missing or not a string");
    }
    return it->get<std::string>();
  };
  auto set_id = str(j, "set_id", "set");
  std::string description = j.contains("description") ? str(j, "description", "set") : std::string{};
  auto it = j.find("hypotheses");
  if (it == j.end() || !it->is_array()) throw ValidationError("set '" + set_id + "': 'hypotheses' must be an array");
  std::vector<Hypothesis> hs;
  std::size_t i = 0;
  for (const auto& e : *it) {
    ++i;
    const auto where = "hypothesis #" + std::to_string(i);
    if (!e.is_object()) throw ValidationError(where + " is not an object");
    hs.push_back({str(e, "id", where), str(e, "text", where), e.contains("category") ? str(e, "category", where) : ""});
  }
  return HypothesisSet(std::move(set_id), std::move(description), std::move(hs));
}

HypothesisSet load_set(const std::filesystem::path& path) {
  const auto text = read_file(path);
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ValidationError("'" + path.string() + "' is not valid JSON");
  return hypothesis_set_from_json(j);
}

HypothesisSet resolve_set(std::string_view id_or_path) {
  if (id_or_path == kFinanceSetId) return builtin_finance_set();
  if (!std::filesystem::exists(id_or_path)) {
    throw ValidationError("unknown hypothesis set '" + std::string(id_or_path) +
                          "' (built-in: finance-domain; otherwise pass a set file)");
  }
  return load_set(id_or_path);
}

}  // namespace cmer
