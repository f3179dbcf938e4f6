#include "cmer/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <map>
#include <unordered_map>

#include "cmer/error.hpp"
#include "cmer/util.hpp"

namespace cmer {

std::string_view to_string(Platform p) {
  switch (p) {
    case Platform::ios:
      return "ios";
    case Platform::android:
      return "android";
    case Platform::unknown:
      break;
  }
  return "unknown";
}

std::optional<Platform> parse_platform(std::string_view s) {
  const auto v = ascii_lower(trim(s));
  if (v == "ios") return Platform::ios;
  if (v == "android") return Platform::android;
  if (v == "unknown" || v.empty()) return Platform::unknown;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Dates

std::string to_iso(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", d.year, d.month, d.day);
  return buf;
}

namespace {

bool valid_calendar(const Date& d) {
  if (d.year < 1 || d.year > 9999 || d.month < 1 || d.month > 12 || d.day < 1) return false;
  static constexpr std::array<int, 12> kDays{31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  int max_day = kDays[static_cast<std::size_t>(d.month - 1)];
  const bool leap = (d.year % 4 == 0 && d.year % 100 != 0) || d.year % 400 == 0;
  if (d.month == 2 && leap) max_day = 29;
  return d.day <= max_day;
}

std::optional<int> to_int(std::string_view s) {
  int v = 0;
  if (s.empty()) return std::nullopt;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::optional<int> month_from_name(std::string_view name) {
  static constexpr std::array<std::string_view, 12> kNames{"jan", "feb", "mar", "apr", "may", "jun",
                                                           "jul", "aug", "sep", "oct", "nov", "dec"};
  if (name.size() < 3) return std::nullopt;
  const auto key = ascii_lower(name.substr(0, 3));
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (key == kNames[i]) return static_cast<int>(i + 1);
  }
  return std::nullopt;
}

}  // namespace

std::optional<Date> parse_date(std::string_view raw) {
  const std::string s = trim(raw);
  std::string_view v = s;
  std::optional<Date> d;

  auto ymd = [&](std::string_view text, char sep) -> std::optional<Date> {
    auto parts = split_on(text, sep);
    if (parts.size() != 3 || parts[0].size() != 4) return std::nullopt;
    auto y = to_int(parts[0]), m = to_int(parts[1]), dd = to_int(parts[2]);
    if (!y || !m || !dd) return std::nullopt;
    return Date{*y, *m, *dd};
  };

  if (v.size() >= 10 && v[4] == '-' && v[7] == '-') {
    // Timestamps like 2020-01-09T12:00:00Z or "2020-01-09 12:00".
    d = ymd(v.substr(0, 10), '-');
    if (v.size() > 10 && v[10] != 'T' && v[10] != ' ') d.reset();
  } else if (v.find('/') != std::string_view::npos) {
    auto parts = split_on(v, '/');
    if (parts.size() == 3 && parts[0].size() == 4) {
      d = ymd(v, '/');
    } else if (parts.size() == 3 && parts[2].size() == 4) {
      auto a = to_int(parts[0]), b = to_int(parts[1]), y = to_int(parts[2]);
      if (a && b && y) {
        // US order unless the first field cannot be a month.
        d = *a > 12 ? Date{*y, *b, *a} : Date{*y, *a, *b};
      }
    }
  } else if (v.find('.') != std::string_view::npos) {
    auto parts = split_on(v, '.');
    if (parts.size() == 3 && parts[2].size() == 4) {
      auto dd = to_int(parts[0]), m = to_int(parts[1]), y = to_int(parts[2]);
      if (dd && m && y) d = Date{*y, *m, *dd};
    }
  } else {
    // "Jan 9, 2020"
    auto space = v.find(' ');
    auto comma = v.find(',');
    if (space != std::string_view::npos && comma != std::string_view::npos && comma > space) {
      auto m = month_from_name(v.substr(0, space));
      auto dd = to_int(trim(v.substr(space + 1, comma - space - 1)));
      auto y = to_int(trim(v.substr(comma + 1)));
      if (m && dd && y) d = Date{*y, *m, *dd};
    }
  }
  if (d && !valid_calendar(*d)) d.reset();
  return d;
}

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(std::string name, std::vector<Review> reviews, std::string provenance)
    : name_(std::move(name)), reviews_(std::move(reviews)), provenance_(std::move(provenance)) {
  std::stable_sort(reviews_.begin(), reviews_.end(),
                   [](const Review& a, const Review& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < reviews_.size(); ++i) {
    if (reviews_[i].id == reviews_[i - 1].id) {
      throw ValidationError("duplicate review id '" + reviews_[i].id + "'");
    }
  }
}

const Review* Corpus::find(std::string_view id) const {
  auto it = std::lower_bound(reviews_.begin(), reviews_.end(), id,
                             [](const Review& r, std::string_view key) { return r.id < key; });
  if (it == reviews_.end() || it->id != id) return nullptr;
  return &*it;
}

LabelCounts Corpus::label_counts() const {
  LabelCounts c;
  for (const auto& r : reviews_) {
    if (!r.label) {
      ++c.unlabeled;
    } else if (*r.label == Label::psr) {
      ++c.psr;
    } else {
      ++c.non_psr;
    }
  }
  return c;
}

Format parse_format(std::string_view s) {
  const auto v = ascii_lower(s);
  if (v == "jsonl") return Format::jsonl;
  if (v == "csv") return Format::csv;
  throw ValidationError("unknown corpus format '" + std::string(s) + "' (expected jsonl or csv)");
}

// ---------------------------------------------------------------------------
// Record conversion

nlohmann::ordered_json to_json(const Review& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["app"] = r.app;
  j["platform"] = std::string(to_string(r.platform));
  j["rating"] = r.rating;
  j["date"] = to_iso(r.date);
  j["text"] = r.text;
  if (r.label) j["label"] = static_cast<int>(*r.label);
  return j;
}

namespace {

std::string required_string(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) throw ValidationError(std::string("missing required field '") + key + "'");
  if (!it->is_string()) throw ValidationError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

int parse_rating(const nlohmann::json& v) {
  std::optional<int> rating;
  if (v.is_number_integer()) {
    rating = v.get<int>();
  } else if (v.is_string()) {
    rating = to_int(trim(v.get<std::string>()));
  }
  if (!rating) throw ValidationError("field 'rating' must be an integer");
  if (*rating < 1 || *rating > 5) {
    throw ValidationError("rating " + std::to_string(*rating) + " outside 1-5");
  }
  return *rating;
}

std::optional<Label> parse_label(const nlohmann::json& v) {
  if (v.is_null()) return std::nullopt;
  std::optional<int> label;
  if (v.is_number_integer()) {
    label = v.get<int>();
  } else if (v.is_string()) {
    const auto s = trim(v.get<std::string>());
    if (s.empty()) return std::nullopt;
    label = to_int(s);
  }
  if (!label || (*label != 0 && *label != 1)) throw ValidationError("label must be 0 or 1");
  return static_cast<Label>(*label);
}

}  // namespace

Review review_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("record is not a JSON object");
  Review r;
  r.id = required_string(j, "id");
  if (trim(r.id).empty()) throw ValidationError("field 'id' is empty");
  r.app = required_string(j, "app");
  const auto platform = required_string(j, "platform");
  auto p = parse_platform(platform);
  if (!p) throw ValidationError("unknown platform '" + platform + "'");
  r.platform = *p;
  auto rating = j.find("rating");
  if (rating == j.end() || rating->is_null()) throw ValidationError("missing required field 'rating'");
  r.rating = parse_rating(*rating);
  const auto date = required_string(j, "date");
  auto d = parse_date(date);
  if (!d) throw ValidationError("unparseable date '" + date + "'");
  r.date = *d;
  r.text = required_string(j, "text");
  if (trim(r.text).empty()) throw ValidationError("field 'text' is empty");
  if (auto it = j.find("label"); it != j.end()) r.label = parse_label(*it);
  return r;
}

// ---------------------------------------------------------------------------
// Ingestion

namespace {

struct CsvRecord {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

// RFC 4180: quoted fields, doubled quotes, embedded newlines.
std::vector<CsvRecord> parse_csv(std::string_view text) {
  std::vector<CsvRecord> records;
  CsvRecord current;
  std::string field;
  bool in_quotes = false;
  bool any = false;
  std::size_t line = 1;
  current.line = line;

  auto end_field = [&] {
    current.fields.push_back(std::move(field));
    field.clear();
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(current));
    current = CsvRecord{};
    any = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        any = true;
        break;
      case ',':
        end_field();
        any = true;
        break;
      case '\r':
        break;
      case '\n':
        if (any || !field.empty()) end_record();
        ++line;
        current.line = line;
        break;
      default:
        field.push_back(c);
        any = true;
    }
  }
  if (in_quotes) throw ValidationError("unterminated quoted field starting near line " + std::to_string(current.line));
  if (any || !field.empty()) end_record();
  return records;
}

struct RawRecord {
  std::size_t row;
  nlohmann::json value;
};

void finish_ingest(std::vector<RawRecord> raw, IngestResult& result, std::string name, std::string provenance) {
  std::vector<Review> reviews;
  std::unordered_map<std::string, std::size_t> seen;
  for (auto& rec : raw) {
    Review review;
    try {
      review = review_from_json(rec.value);
    } catch (const ValidationError& e) {
      result.errors.push_back({rec.row, e.what()});
      continue;
    }
    if (auto [it, inserted] = seen.emplace(review.id, rec.row); !inserted) {
      throw ValidationError("duplicate review id '" + review.id + "' at rows " + std::to_string(it->second) +
                            " and " + std::to_string(rec.row));
    }
    reviews.push_back(std::move(review));
  }
  std::stable_sort(result.errors.begin(), result.errors.end(),
                   [](const RecordError& a, const RecordError& b) { return a.row < b.row; });
  result.corpus = Corpus(std::move(name), std::move(reviews), std::move(provenance));
}

}  // namespace

IngestResult ingest_text(std::string_view contents, Format format, std::string name) {
  IngestResult result;
  std::vector<RawRecord> raw;
  if (format == Format::jsonl) {
    std::size_t row = 0;
    for (const auto& line : split_lines(contents)) {
      if (trim(line).empty()) continue;
      ++row;
      auto parsed = nlohmann::json::parse(line, nullptr, false);
      if (parsed.is_discarded()) {
        result.errors.push_back({row, "malformed JSON"});
        continue;
      }
      raw.push_back({row, std::move(parsed)});
    }
  } else {
    auto records = parse_csv(contents);
    if (!records.empty()) {
      const auto& header = records.front().fields;
      std::vector<std::string> columns;
      for (const auto& h : header) columns.push_back(ascii_lower(trim(h)));
      for (const char* required : {"id", "app", "platform", "rating", "date", "text"}) {
        if (std::find(columns.begin(), columns.end(), required) == columns.end()) {
          throw ValidationError(std::string("CSV header lacks required column '") + required + "'");
        }
      }
      for (std::size_t i = 1; i < records.size(); ++i) {
        const auto& fields = records[i].fields;
        if (fields.size() != columns.size()) {
          result.errors.push_back({i, "expected " + std::to_string(columns.size()) + " fields, found " +
                                          std::to_string(fields.size())});
          continue;
        }
        nlohmann::json obj = nlohmann::json::object();
        for (std::size_t c = 0; c < columns.size(); ++c) obj[columns[c]] = fields[c];
        raw.push_back({i, std::move(obj)});
      }
    }
  }
  finish_ingest(std::move(raw), result, std::move(name), sha256_hex(contents));
  return result;
}

IngestResult ingest(const std::filesystem::path& path, Format format) {
  const auto contents = read_file(path);
  return ingest_text(contents, format, path.stem().string());
}

// ---------------------------------------------------------------------------
// Preprocessing

namespace {

// Decodes one code point; malformed sequences yield U+FFFD and consume one byte.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto lead = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (lead < 0x80) {
    ++i;
    return lead;
  }
  std::size_t len = 0;
  char32_t cp = 0;
  if ((lead & 0xE0) == 0xC0) {
    len = 2;
    cp = lead & 0x1F;
  } else if ((lead & 0xF0) == 0xE0) {
    len = 3;
    cp = lead & 0x0F;
  } else if ((lead & 0xF8) == 0xF0) {
    len = 4;
    cp = lead & 0x07;
  } else {
    ++i;
    return 0xFFFD;
  }
  for (std::size_t k = 1; k < len; ++k) {
    const int c = cont(k);
    if (c < 0) {
      ++i;
      return 0xFFFD;
    }
    cp = (cp << 6) | static_cast<char32_t>(c);
  }
  i += len;
  return cp;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_space_cp(char32_t cp) {
  return cp == ' ' || (cp >= 0x09 && cp <= 0x0D) || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
         (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F || cp == 0x205F ||
         cp == 0x3000;
}

bool is_kept_punct(char32_t cp) {
  switch (cp) {
    case '.':
    case ',':
    case '!':
    case '?':
    case '\'':
    case '"':
    case '$':
    case '%':
      return true;
    default:
      return false;
  }
}

// Letters outside ASCII are limited to the Latin, Greek and Cyrillic blocks of
// the BMP; everything above U+FFFF (where nearly all emoji live), the BMP
// symbol/dingbat blocks, and CJK are dropped.
bool is_extended_letter(char32_t cp) {
  if (cp >= 0xC0 && cp <= 0x24F) return cp != 0xD7 && cp != 0xF7;
  if (cp >= 0x386 && cp <= 0x3FF) return cp != 0x387 && cp != 0x3A2;
  if (cp >= 0x400 && cp <= 0x481) return true;
  if (cp >= 0x48A && cp <= 0x4FF) return true;
  return false;
}

char32_t to_lower_cp(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;
  if (cp >= 0x100 && cp <= 0x137) return cp | 1;
  if (cp >= 0x139 && cp <= 0x148) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x14A && cp <= 0x177) return cp | 1;
  if (cp == 0x178) return 0xFF;
  if (cp >= 0x179 && cp <= 0x17E) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 0x20;
  if (cp == 0x386) return 0x3AC;
  if (cp >= 0x388 && cp <= 0x38A) return cp + 0x25;
  if (cp == 0x38C) return 0x3CC;
  if (cp == 0x38E || cp == 0x38F) return cp + 0x3F;
  if (cp >= 0x410 && cp <= 0x42F) return cp + 0x20;
  if (cp >= 0x400 && cp <= 0x40F) return cp + 0x50;
  return cp;
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (std::size_t i = 0; i < text.size();) {
    const char32_t cp = next_code_point(text, i);
    if (is_space_cp(cp)) {
      pending_space = !out.empty();
      continue;
    }
    const bool keep = (cp < 0x80 && (std::isalnum(static_cast<int>(cp)) || is_kept_punct(cp))) ||
                      is_extended_letter(cp);
    if (!keep) continue;
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    append_utf8(out, to_lower_cp(cp));
  }
  return out;
}

PreprocessResult preprocess(const Review& review) {
  PreprocessResult result{review, false};
  result.review.text = normalize_text(review.text);
  result.quarantined = result.review.text.empty();
  return result;
}

PreprocessedCorpus preprocess_corpus(const Corpus& corpus) {
  PreprocessedCorpus out;
  std::vector<Review> kept;
  kept.reserve(corpus.size());
  for (const auto& r : corpus.reviews()) {
    auto p = preprocess(r);
    if (p.quarantined) {
      out.quarantined.push_back(r);
    } else {
      kept.push_back(std::move(p.review));
    }
  }
  out.corpus = Corpus(corpus.name(), std::move(kept), corpus.provenance());
  return out;
}

Corpus filter_by_rating(const Corpus& corpus, int max_rating) {
  if (max_rating < 1 || max_rating > 5) {
    throw ValidationError("max_rating must be within 1-5, got " + std::to_string(max_rating));
  }
  std::vector<Review> kept;
  std::copy_if(corpus.reviews().begin(), corpus.reviews().end(), std::back_inserter(kept),
               [&](const Review& r) { return r.rating <= max_rating; });
  return Corpus(corpus.name(), std::move(kept), corpus.provenance());
}

std::string to_jsonl(const std::vector<Review>& reviews) {
  std::string out;
  for (const auto& r : reviews) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

std::string to_jsonl(const Corpus& corpus) { return to_jsonl(corpus.reviews()); }

void export_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  write_file_atomic(path, to_jsonl(corpus));
}

}  // namespace cmer
