#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "egoground/error.hpp"
#include "egoground/geometry.hpp"
#include "egoground/grammar.hpp"
#include "json.hpp"

namespace egoground {

enum class QueryType { kContext, kUncommon, kObject };
enum class Split { kTrain, kVal, kTest };

inline constexpr std::array<QueryType, 3> kAllQueryTypes{QueryType::kContext,
                                                         QueryType::kUncommon, QueryType::kObject};
inline constexpr std::array<Split, 3> kAllSplits{Split::kTrain, Split::kVal, Split::kTest};

inline std::string_view to_string(QueryType t) {
  switch (t) {
    case QueryType::kContext: return "context";
    case QueryType::kUncommon: return "uncommon";
    case QueryType::kObject: return "object";
  }
  return "context";
}

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

inline QueryType parse_query_type(std::string_view s) {
  for (auto t : kAllQueryTypes) {
    if (to_string(t) == s) return t;
  }
  throw Error(ErrorCode::kInvalidInput, "unknown query_type '" + std::string(s) + "'");
}

inline Split parse_split(std::string_view s) {
  for (auto sp : kAllSplits) {
    if (to_string(sp) == s) return sp;
  }
  throw Error(ErrorCode::kInvalidInput, "unknown split '" + std::string(s) + "'");
}

inline void to_json(nlohmann::json& j, const BBox& b) { j = {b.x1, b.y1, b.x2, b.y2}; }
inline void from_json(const nlohmann::json& j, BBox& b) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorCode::kInvalidInput, "box must be [x1,y1,x2,y2]");
  b = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}
inline void to_json(nlohmann::json& j, const ImageSize& s) {
  j = {{"width", s.width}, {"height", s.height}};
}
inline void from_json(const nlohmann::json& j, ImageSize& s) {
  s = {j.at("width").get<int>(), j.at("height").get<int>()};
}

/// One image + query + ground-truth set. Pixel data is referenced, never embedded.
struct IntentionRecord {
  std::string record_id;
  std::string image_ref;
  ImageSize image_size;
  std::string object_category;
  QueryType query_type = QueryType::kContext;
  std::string query_text;
  BBox primary_bbox;
  std::vector<BBox> alternative_bboxes;
  Split split = Split::kTrain;
  nlohmann::json provenance;  // null unless written by the annotation service

  std::vector<BBox> ground_truth(bool with_alternatives) const {
    std::vector<BBox> out{primary_bbox};
    if (with_alternatives) out.insert(out.end(), alternative_bboxes.begin(), alternative_bboxes.end());
    return out;
  }

  friend bool operator==(const IntentionRecord&, const IntentionRecord&) = default;
};

inline void to_json(nlohmann::json& j, const IntentionRecord& r) {
  j = {{"record_id", r.record_id},
       {"image_ref", r.image_ref},
       {"image_size", r.image_size},
       {"object_category", r.object_category},
       {"query_type", to_string(r.query_type)},
       {"query_text", r.query_text},
       {"primary_bbox", r.primary_bbox},
       {"alternative_bboxes", r.alternative_bboxes},
       {"split", to_string(r.split)}};
  if (!r.provenance.is_null()) j["provenance"] = r.provenance;
}

inline void from_json(const nlohmann::json& j, IntentionRecord& r) {
  r.record_id = j.at("record_id").get<std::string>();
  r.image_ref = j.at("image_ref").get<std::string>();
  r.image_size = j.at("image_size").get<ImageSize>();
  r.object_category = j.at("object_category").get<std::string>();
  r.query_type = parse_query_type(j.at("query_type").get<std::string>());
  r.query_text = j.at("query_text").get<std::string>();
  r.primary_bbox = j.at("primary_bbox").get<BBox>();
  r.alternative_bboxes = j.value("alternative_bboxes", std::vector<BBox>{});
  r.split = parse_split(j.at("split").get<std::string>());
  r.provenance = j.value("provenance", nlohmann::json());
}

struct SplitCounts {
  std::size_t images = 0;
  std::map<QueryType, std::size_t> boxes;  // primary + alternatives, per query type

  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

using DatasetStats = std::map<Split, SplitCounts>;

inline nlohmann::json stats_to_json(const DatasetStats& stats) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [split, c] : stats) {
    nlohmann::json row = {{"images", c.images}};
    for (const auto& [t, n] : c.boxes) row[std::string(to_string(t))] = n;
    j[std::string(to_string(split))] = row;
  }
  return j;
}

inline DatasetStats stats_from_json(const nlohmann::json& j) {
  DatasetStats stats;
  for (const auto& [key, row] : j.items()) {
    SplitCounts c;
    c.images = row.at("images").get<std::size_t>();
    for (auto t : kAllQueryTypes) {
      const std::string name(to_string(t));
      if (row.contains(name)) c.boxes[t] = row.at(name).get<std::size_t>();
    }
    stats[parse_split(key)] = c;
  }
  return stats;
}

struct Manifest {
  std::vector<IntentionRecord> records;
  std::optional<DatasetStats> declared_stats;
};

/// Line-delimited manifest: one record object per line, plus an optional line
/// holding only {"declared_stats": {...}}. Blank lines are ignored.
inline Manifest read_manifest(std::istream& in, const std::string& origin = "<stream>") {
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.contains("declared_stats") && !j.contains("record_id")) {
        m.declared_stats = stats_from_json(j.at("declared_stats"));
      } else {
        m.records.push_back(j.get<IntentionRecord>());
      }
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kLoad, origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open manifest " + path.string());
  return read_manifest(in, path.string());
}

inline void write_manifest(std::ostream& out, const Manifest& m) {
  if (m.declared_stats) {
    out << nlohmann::json{{"declared_stats", stats_to_json(*m.declared_stats)}}.dump() << '\n';
  }
  for (const auto& r : m.records) out << nlohmann::json(r).dump() << '\n';
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kLoad, "cannot write manifest " + path.string());
  write_manifest(out, m);
}

// ---------------------------------------------------------------------------
// Validation

enum class IssueKind {
  kDuplicateId,
  kInvalidBox,
  kOutOfBounds,
  kInvalidImageSize,
  kEmptyQuery,
  kObjectQueryMismatch,
  kStatMismatch,
};

inline std::string_view to_string(IssueKind k) {
  switch (k) {
    case IssueKind::kDuplicateId: return "duplicate_id";
    case IssueKind::kInvalidBox: return "invalid_box";
    case IssueKind::kOutOfBounds: return "out_of_bounds";
    case IssueKind::kInvalidImageSize: return "invalid_image_size";
    case IssueKind::kEmptyQuery: return "empty_query";
    case IssueKind::kObjectQueryMismatch: return "object_query_mismatch";
    case IssueKind::kStatMismatch: return "stat_mismatch";
  }
  return "unknown";
}

struct ValidationIssue {
  IssueKind kind;
  std::string record_id;  // empty for manifest-level issues
  std::string message;
};

struct ValidationResult {
  DatasetStats stats;
  std::vector<ValidationIssue> issues;

  bool ok() const { return issues.empty(); }
  std::size_t count(IssueKind k) const {
    return static_cast<std::size_t>(
        std::count_if(issues.begin(), issues.end(), [k](const auto& i) { return i.kind == k; }));
  }
};

inline DatasetStats compute_stats(const std::vector<IntentionRecord>& records) {
  DatasetStats stats;
  std::map<Split, std::unordered_set<std::string>> images;
  for (const auto& r : records) {
    images[r.split].insert(r.image_ref);
    stats[r.split].boxes[r.query_type] += 1 + r.alternative_bboxes.size();
  }
  for (auto& [split, c] : stats) c.images = images[split].size();
  return stats;
}

inline ValidationResult validate_manifest(const Manifest& m) {
  ValidationResult res;
  res.stats = compute_stats(m.records);
  std::unordered_set<std::string> seen;
  auto issue = [&](IssueKind k, const std::string& id, std::string msg) {
    res.issues.push_back({k, id, std::move(msg)});
  };
  for (const auto& r : m.records) {
    if (!seen.insert(r.record_id).second) issue(IssueKind::kDuplicateId, r.record_id, "duplicate record_id");
    if (r.query_text.empty()) issue(IssueKind::kEmptyQuery, r.record_id, "empty query_text");
    if (r.query_type == QueryType::kObject && r.query_text != r.object_category) {
      issue(IssueKind::kObjectQueryMismatch, r.record_id,
            "object query '" + r.query_text + "' differs from category '" + r.object_category + "'");
    }
    if (!r.image_size.valid()) {
      issue(IssueKind::kInvalidImageSize, r.record_id, "image_size must be at least 1x1");
      continue;
    }
    auto check_box = [&](const BBox& b, const std::string& what) {
      if (!b.valid()) {
        issue(IssueKind::kInvalidBox, r.record_id, what + " " + to_string(b) + " is degenerate");
      } else if (!within(b, r.image_size)) {
        issue(IssueKind::kOutOfBounds, r.record_id,
              what + " " + to_string(b) + " exceeds " + std::to_string(r.image_size.width) + "x" +
                  std::to_string(r.image_size.height));
      }
    };
    check_box(r.primary_bbox, "primary_bbox");
    for (std::size_t i = 0; i < r.alternative_bboxes.size(); ++i) {
      check_box(r.alternative_bboxes[i], "alternative_bboxes[" + std::to_string(i) + "]");
    }
  }
  if (m.declared_stats) {
    const auto& declared = *m.declared_stats;
    auto mismatch = [&](Split s, std::string_view field, std::size_t want, std::size_t got) {
      if (want != got) {
        issue(IssueKind::kStatMismatch, "",
              std::string(to_string(s)) + "." + std::string(field) + ": declared " +
                  std::to_string(want) + ", found " + std::to_string(got));
      }
    };
    for (auto s : kAllSplits) {
      const auto d = declared.find(s);
      const auto f = res.stats.find(s);
      const SplitCounts found = f == res.stats.end() ? SplitCounts{} : f->second;
      if (d == declared.end()) {
        if (found.images != 0) mismatch(s, "images", 0, found.images);
        continue;
      }
      mismatch(s, "images", d->second.images, found.images);
      for (auto t : kAllQueryTypes) {
        const auto want = d->second.boxes.find(t);
        const auto got = found.boxes.find(t);
        const std::size_t got_n = got == found.boxes.end() ? 0 : got->second;
        // An undeclared type column is only checked when records carry it.
        if (want == d->second.boxes.end()) {
          if (got_n != 0) mismatch(s, to_string(t), 0, got_n);
        } else {
          mismatch(s, to_string(t), want->second, got_n);
        }
      }
    }
  }
  return res;
}

inline void require_valid(const Manifest& m, const std::string& origin = "manifest") {
  auto res = validate_manifest(m);
  if (!res.ok()) {
    const auto& first = res.issues.front();
    throw Error(ErrorCode::kValidation, origin + ": " + std::to_string(res.issues.size()) +
                                            " issue(s), first: " + std::string(to_string(first.kind)) +
                                            " " + first.record_id + " " + first.message);
  }
}

// ---------------------------------------------------------------------------
// Instruction-tuning conversations

enum class Role { kUser, kAssistant };

inline std::string_view to_string(Role r) { return r == Role::kUser ? "user" : "assistant"; }

struct Turn {
  Role role;
  std::string content;
  friend bool operator==(const Turn&, const Turn&) = default;
};

struct TuningConversation {
  std::string conversation_id;
  std::string image_ref;
  std::vector<Turn> turns;

  /// Roles alternate starting with the user and the last turn is the assistant's.
  bool well_formed() const {
    if (turns.empty() || turns.back().role != Role::kAssistant) return false;
    for (std::size_t i = 0; i < turns.size(); ++i) {
      if (turns[i].role != (i % 2 == 0 ? Role::kUser : Role::kAssistant)) return false;
    }
    return true;
  }

  friend bool operator==(const TuningConversation&, const TuningConversation&) = default;
};

inline void to_json(nlohmann::json& j, const TuningConversation& c) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : c.turns) turns.push_back({{"role", to_string(t.role)}, {"content", t.content}});
  j = {{"conversation_id", c.conversation_id}, {"image_ref", c.image_ref}, {"turns", turns}};
}

inline void from_json(const nlohmann::json& j, TuningConversation& c) {
  c.conversation_id = j.at("conversation_id").get<std::string>();
  c.image_ref = j.at("image_ref").get<std::string>();
  c.turns.clear();
  for (const auto& t : j.at("turns")) {
    const auto role = t.at("role").get<std::string>();
    if (role != "user" && role != "assistant") throw Error(ErrorCode::kInvalidInput, "bad role " + role);
    c.turns.push_back({role == "user" ? Role::kUser : Role::kAssistant, t.at("content").get<std::string>()});
  }
}

inline void write_conversations(std::ostream& out, const std::vector<TuningConversation>& convs) {
  for (const auto& c : convs) out << nlohmann::json(c).dump() << '\n';
}

inline std::vector<TuningConversation> read_conversations(std::istream& in) {
  std::vector<TuningConversation> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(nlohmann::json::parse(line).get<TuningConversation>());
  }
  return out;
}

/// Two exchanges per intention record: reason the category, then ground it.
/// Object-query records carry no intention to reason over and are skipped.
inline std::vector<TuningConversation> emit_rog_conversations(const Manifest& m, const Grammar& g) {
  require_valid(m);
  std::vector<TuningConversation> out;
  for (const auto& r : m.records) {
    if (r.query_type == QueryType::kObject) continue;
    out.push_back({r.record_id + ":rog",
                   r.image_ref,
                   {{Role::kUser, g.reason_prompt(r.query_text)},
                    {Role::kAssistant, r.object_category},
                    {Role::kUser, g.ref_prompt(r.object_category)},
                    {Role::kAssistant, g.serialize_box(r.primary_bbox, r.image_size)}}});
  }
  return out;
}

/// Single exchange per record. `user_template` may use {REF} and {QUERY}.
inline std::vector<TuningConversation> emit_naive_conversations(
    const Manifest& m, const Grammar& g, std::string_view user_template = "{REF} {QUERY}") {
  require_valid(m);
  std::vector<TuningConversation> out;
  for (const auto& r : m.records) {
    std::string user(user_template);
    for (auto [key, value] : {std::pair<std::string_view, const std::string*>{"{REF}", &g.spec().ref_token},
                              {"{QUERY}", &r.query_text}}) {
      for (auto at = user.find(key); at != std::string::npos; at = user.find(key, at + value->size())) {
        user.replace(at, key.size(), *value);
      }
    }
    out.push_back({r.record_id + ":naive",
                   r.image_ref,
                   {{Role::kUser, user}, {Role::kAssistant, g.serialize_box(r.primary_bbox, r.image_size)}}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixing

enum class ConversationStyle { kRog, kNaive };

struct MixSource {
  std::filesystem::path manifest;
  ConversationStyle style = ConversationStyle::kRog;
};

struct MixSpec {
  std::vector<MixSource> sources;
  std::uint64_t shuffle_seed = 0;
};

/// Relative manifest paths resolve against `base_dir`.
inline MixSpec load_mix_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open mix spec " + path.string());
  MixSpec spec;
  try {
    const auto j = nlohmann::json::parse(in);
    spec.shuffle_seed = j.value("shuffle_seed", std::uint64_t{0});
    for (const auto& s : j.at("sources")) {
      std::filesystem::path p = s.at("manifest").get<std::string>();
      if (p.is_relative()) p = path.parent_path() / p;
      const auto style = s.value("style", std::string("rog"));
      if (style != "rog" && style != "naive") throw Error(ErrorCode::kInvalidInput, "unknown style " + style);
      spec.sources.push_back({p, style == "rog" ? ConversationStyle::kRog : ConversationStyle::kNaive});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
  }
  return spec;
}

/// Fisher-Yates over mt19937_64 with rejection-sampled bounds, so the order is
/// identical on every standard library (std::shuffle's is not specified).
template <typename T>
void deterministic_shuffle(std::vector<T>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::uint64_t bound = i;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = rng();
    } while (x >= limit);
    std::swap(items[i - 1], items[static_cast<std::size_t>(x % bound)]);
  }
}

inline std::vector<TuningConversation> mix_datasets(const MixSpec& spec, const Grammar& g) {
  if (spec.sources.empty()) throw Error(ErrorCode::kInvalidInput, "mix spec has no sources");
  std::vector<TuningConversation> all;
  for (const auto& src : spec.sources) {
    Manifest m;
    try {
      m = load_manifest(src.manifest);
    } catch (const Error& e) {
      throw Error(ErrorCode::kLoad, "source " + src.manifest.string() + ": " + e.what());
    }
    require_valid(m, "source " + src.manifest.string());
    auto convs = src.style == ConversationStyle::kRog ? emit_rog_conversations(m, g)
                                                       : emit_naive_conversations(m, g);
    all.insert(all.end(), std::make_move_iterator(convs.begin()), std::make_move_iterator(convs.end()));
  }
  deterministic_shuffle(all, spec.shuffle_seed);
  return all;
}

// ---------------------------------------------------------------------------
// Affordance vocabulary

struct VocabularyEntry {
  std::string category;
  std::string primary_function;
};

/// Tab-separated `category<TAB>primary_function` with a header row.
inline std::vector<VocabularyEntry> load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open vocabulary " + path.string());
  std::vector<VocabularyEntry> out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(ErrorCode::kLoad, path.string() + ": missing tab in '" + line + "'");
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

inline std::vector<std::string> vocabulary_categories(const std::vector<VocabularyEntry>& v) {
  std::vector<std::string> out;
  out.reserve(v.size());
  for (const auto& e : v) out.push_back(e.category);
  return out;
}

}  // namespace egoground
