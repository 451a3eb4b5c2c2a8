#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "egoground/backend.hpp"
#include "egoground/dataset.hpp"
#include "egoground/error.hpp"
#include "egoground/metrics.hpp"
#include "json.hpp"

namespace egoground {

// ---------------------------------------------------------------------------
// Prompt templates

struct PromptSegment {
  std::string role;  // system | user | assistant | examples
  std::string text;
};

/// Role-tagged prompt with {OBJECT}/{IMAGE_REF}-style placeholders. A segment
/// with role "examples" marks where the in-context (user, assistant) pairs go;
/// without one they precede the final segment.
struct PromptTemplate {
  std::string template_id;
  std::optional<QueryType> intention_type;
  std::vector<PromptSegment> segments;
  std::vector<std::pair<std::string, std::string>> in_context_examples;
};

inline PromptTemplate prompt_template_from_json(const nlohmann::json& j) {
  PromptTemplate t;
  t.template_id = j.at("template_id").get<std::string>();
  if (j.contains("intention_type")) t.intention_type = parse_query_type(j["intention_type"].get<std::string>());
  for (const auto& s : j.at("segments")) {
    t.segments.push_back({s.at("role").get<std::string>(), s.value("text", std::string())});
  }
  for (const auto& e : j.value("in_context_examples", nlohmann::json::array())) {
    t.in_context_examples.emplace_back(e.at("user").get<std::string>(), e.at("assistant").get<std::string>());
  }
  return t;
}

inline PromptTemplate load_prompt_template(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open prompt template " + path.string());
  try {
    return prompt_template_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
  }
}

using Bindings = std::map<std::string, std::string, std::less<>>;

/// Replaces every {NAME} placeholder (uppercase letters and underscores).
/// An unbound placeholder is a template error.
inline std::string substitute(std::string_view text, const Bindings& bindings) {
  std::string out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto open = text.find('{', pos);
    if (open == std::string_view::npos) break;
    const auto close = text.find('}', open + 1);
    if (close == std::string_view::npos) break;
    const auto name = text.substr(open + 1, close - open - 1);
    const bool is_placeholder =
        !name.empty() && std::isupper(static_cast<unsigned char>(name.front())) &&
        std::all_of(name.begin(), name.end(), [](char c) {
          return std::isupper(static_cast<unsigned char>(c)) || c == '_' ||
                 std::isdigit(static_cast<unsigned char>(c));
        });
    out.append(text.substr(pos, open - pos));
    if (!is_placeholder) {
      out.push_back('{');
      pos = open + 1;
      continue;
    }
    const auto it = bindings.find(name);
    if (it == bindings.end()) {
      throw Error(ErrorCode::kTemplate, "unbound placeholder {" + std::string(name) + "}");
    }
    out += it->second;
    pos = close + 1;
  }
  out.append(text.substr(pos));
  return out;
}

/// Expands a template into a message list. The image attachment goes on the
/// last user message.
inline std::vector<Message> render_template(const PromptTemplate& tmpl, const Bindings& bindings,
                                            std::optional<ImageAttachment> image = std::nullopt) {
  std::vector<Message> out;
  const bool has_marker = std::any_of(tmpl.segments.begin(), tmpl.segments.end(),
                                      [](const auto& s) { return s.role == "examples"; });
  auto emit_examples = [&] {
    for (const auto& [user, assistant] : tmpl.in_context_examples) {
      out.push_back({"user", substitute(user, bindings), std::nullopt});
      out.push_back({"assistant", substitute(assistant, bindings), std::nullopt});
    }
  };
  for (std::size_t i = 0; i < tmpl.segments.size(); ++i) {
    const auto& seg = tmpl.segments[i];
    if (seg.role == "examples") {
      emit_examples();
      continue;
    }
    if (!has_marker && i + 1 == tmpl.segments.size()) emit_examples();
    if (seg.role != "system" && seg.role != "user" && seg.role != "assistant") {
      throw Error(ErrorCode::kTemplate, "unknown segment role " + seg.role);
    }
    out.push_back({seg.role, substitute(seg.text, bindings), std::nullopt});
  }
  if (image) {
    for (auto it = out.rbegin(); it != out.rend(); ++it) {
      if (it->role == "user") {
        it->image = std::move(image);
        break;
      }
    }
  }
  return out;
}

/// Stage-1 generation prompt for one source object. The context variant shows
/// the full image with the target marked; the uncommon variant shows the crop.
inline std::vector<Message> build_generation_prompt(const IntentionRecord& record, QueryType type,
                                                    const PromptTemplate& tmpl) {
  if (type == QueryType::kObject) throw Error(ErrorCode::kTemplate, "no generation prompt for object queries");
  if (tmpl.intention_type && *tmpl.intention_type != type) {
    throw Error(ErrorCode::kTemplate, "template " + tmpl.template_id + " is for " +
                                          std::string(to_string(*tmpl.intention_type)) + " intentions");
  }
  ImageAttachment image{record.image_ref, std::nullopt, std::nullopt};
  if (type == QueryType::kContext) {
    image.mark = record.primary_bbox;
  } else {
    image.crop = record.primary_bbox;
  }
  return render_template(tmpl, {{"OBJECT", record.object_category}, {"IMAGE_REF", record.image_ref}},
                         std::move(image));
}

// ---------------------------------------------------------------------------
// Candidates

inline constexpr std::size_t kCandidatesPerSet = 5;

struct CandidateSet {
  std::string record_id;
  QueryType intention_type = QueryType::kContext;
  std::string object_category;
  std::vector<std::string> sentences;
  int format_retries = 0;
};

inline void to_json(nlohmann::json& j, const CandidateSet& c) {
  j = {{"record_id", c.record_id},
       {"intention_type", to_string(c.intention_type)},
       {"object_category", c.object_category},
       {"sentences", c.sentences},
       {"format_retries", c.format_retries}};
}

inline void from_json(const nlohmann::json& j, CandidateSet& c) {
  c.record_id = j.at("record_id").get<std::string>();
  c.intention_type = parse_query_type(j.at("intention_type").get<std::string>());
  c.object_category = j.value("object_category", std::string());
  c.sentences = j.at("sentences").get<std::vector<std::string>>();
  c.format_retries = j.value("format_retries", 0);
}

inline std::vector<CandidateSet> load_candidate_sets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open candidates " + path.string());
  std::vector<CandidateSet> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<CandidateSet>());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
    }
  }
  return out;
}

/// Lines of the form "1. text" / "2) text"; falls back to all nonempty lines
/// when the reply has no numbering at all.
inline std::vector<std::string> split_numbered_sentences(std::string_view reply) {
  static const std::regex numbered(R"(^\s*\d+\s*[.):]\s*(.*\S)\s*$)");
  std::vector<std::string> numbered_lines;
  std::vector<std::string> plain_lines;
  std::size_t pos = 0;
  while (pos <= reply.size()) {
    auto end = reply.find('\n', pos);
    if (end == std::string_view::npos) end = reply.size();
    std::string line(reply.substr(pos, end - pos));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::smatch m;
    if (std::regex_match(line, m, numbered)) {
      numbered_lines.push_back(m[1].str());
    } else if (line.find_first_not_of(" \t") != std::string::npos) {
      const auto b = line.find_first_not_of(" \t");
      const auto e = line.find_last_not_of(" \t");
      plain_lines.push_back(line.substr(b, e - b + 1));
    }
    pos = end + 1;
  }
  return numbered_lines.empty() ? plain_lines : numbered_lines;
}

/// Sends the rendered prompt and expects exactly five sentences back. A reply
/// with the wrong count is retried once before surfacing a format error.
inline CandidateSet generate_candidates(const IntentionRecord& record, QueryType type,
                                        const PromptTemplate& tmpl, ChatBackend& backend) {
  const auto prompt = build_generation_prompt(record, type, tmpl);
  CandidateSet set{record.record_id, type, record.object_category, {}, 0};
  for (int attempt = 0; attempt < 2; ++attempt) {
    auto sentences = split_numbered_sentences(backend.complete(prompt));
    if (sentences.size() == kCandidatesPerSet) {
      set.sentences = std::move(sentences);
      set.format_retries = attempt;
      return set;
    }
    if (attempt == 1) {
      throw Error(ErrorCode::kFormat, record.record_id + ": expected 5 sentences, got " +
                                          std::to_string(sentences.size()));
    }
  }
  return set;  // unreachable
}

// ---------------------------------------------------------------------------
// Checker

struct CheckerVerdict {
  bool accepted = false;
  std::string rationale;  // nonempty when rejected
  bool leaked = false;    // rejected locally for naming the target
};

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

/// Case-insensitive whole-word search for the category name (or its plural)
/// in a sentence. A parenthetical qualifier such as "Drum (musical
/// instrument)" is ignored.
inline bool mentions_category(std::string_view sentence, std::string_view category) {
  std::string name = lowercase(category.substr(0, category.find('(')));
  while (!name.empty() && std::isspace(static_cast<unsigned char>(name.back()))) name.pop_back();
  while (!name.empty() && std::isspace(static_cast<unsigned char>(name.front()))) name.erase(0, 1);
  if (name.empty()) return false;
  const std::string text = lowercase(sentence);
  const auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (auto at = text.find(name); at != std::string::npos; at = text.find(name, at + 1)) {
    if (at > 0 && is_word(text[at - 1])) continue;
    std::size_t end = at + name.size();
    if (end < text.size() && text[end] == 's') {
      ++end;
    } else if (end + 1 < text.size() && text.compare(end, 2, "es") == 0) {
      end += 2;
    }
    if (end >= text.size() || !is_word(text[end])) return true;
  }
  return false;
}

/// Non-canonical checker prompt; the fixture file overrides it.
inline PromptTemplate default_checker_template() {
  PromptTemplate t;
  t.template_id = "checker-default";
  t.segments = {
      {"system",
       "You verify data for an egocentric assistant. Answer strictly with 'yes' or 'no' followed by a short reason."},
      {"user", "Target object: {OBJECT}\nSentence: {SENTENCE}\nDoes this sentence express a need for the target "
               "object without naming it?"}};
  return t;
}

/// First word of the reply decides: yes/no (case-insensitive, punctuation
/// ignored). Anything else is a checker-format error.
inline CheckerVerdict parse_checker_reply(std::string_view reply) {
  std::size_t b = 0;
  while (b < reply.size() && !std::isalpha(static_cast<unsigned char>(reply[b]))) ++b;
  std::size_t e = b;
  while (e < reply.size() && std::isalpha(static_cast<unsigned char>(reply[e]))) ++e;
  const std::string word = lowercase(reply.substr(b, e - b));
  std::string rest(reply.substr(e));
  const auto rb = rest.find_first_not_of(" \t\r\n.,:;-");
  rest = rb == std::string::npos ? "" : rest.substr(rb);
  if (word == "yes") return {true, rest, false};
  if (word == "no") return {false, rest.empty() ? "checker answered no" : rest, false};
  throw Error(ErrorCode::kCheckerFormat, "unparseable verdict: " + std::string(reply.substr(0, 80)));
}

/// Gate for one sentence. Uncommon sentences that name the category are
/// rejected locally, without a backend call.
inline CheckerVerdict check_sentence(std::string_view sentence, std::string_view category, QueryType type,
                                     ChatBackend& backend,
                                     const PromptTemplate& tmpl = default_checker_template()) {
  if (type == QueryType::kUncommon && mentions_category(sentence, category)) {
    return {false, "leaked target object name '" + std::string(category) + "'", true};
  }
  const auto prompt = render_template(
      tmpl, {{"OBJECT", std::string(category)}, {"SENTENCE", std::string(sentence)}});
  return parse_checker_reply(backend.complete(prompt));
}

inline void to_json(nlohmann::json& j, const CheckerVerdict& v) {
  j = {{"accepted", v.accepted}, {"rationale", v.rationale}, {"leaked", v.leaked}};
}

inline void from_json(const nlohmann::json& j, CheckerVerdict& v) {
  v.accepted = j.at("accepted").get<bool>();
  v.rationale = j.value("rationale", std::string());
  v.leaked = j.value("leaked", false);
}

/// A candidate set with one checker verdict per sentence, in order.
struct CheckedCandidateSet {
  CandidateSet set;
  std::vector<CheckerVerdict> verdicts;
};

inline void to_json(nlohmann::json& j, const CheckedCandidateSet& c) {
  j = nlohmann::json(c.set);
  j["verdicts"] = c.verdicts;
}

inline void from_json(const nlohmann::json& j, CheckedCandidateSet& c) {
  c.set = j.get<CandidateSet>();
  c.verdicts = j.value("verdicts", std::vector<CheckerVerdict>{});
}

inline std::vector<CheckedCandidateSet> load_checked_sets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open checked candidates " + path.string());
  std::vector<CheckedCandidateSet> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<CheckedCandidateSet>());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pass-rate ledger

enum class Stage { kGeneration, kChecker, kHuman };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kGeneration: return "generation";
    case Stage::kChecker: return "checker";
    case Stage::kHuman: return "human";
  }
  return "unknown";
}

struct StageCounts {
  std::size_t generated = 0;
  std::size_t accepted = 0;
  std::size_t leaked = 0;  // local leakage rejections, kept out of generated/accepted

  std::optional<double> pass_rate() const {
    if (generated == 0) return std::nullopt;
    return static_cast<double>(accepted) / static_cast<double>(generated);
  }
};

/// "97.2%" or "—" when nothing was generated.
inline std::string format_pass_rate(const StageCounts& c) {
  const auto r = c.pass_rate();
  return r ? format_percent(*r) + "%" : "—";
}

/// Thread-safe pass-rate books per (intention type, stage).
class PassRateLedger {
 public:
  void record_outcome(QueryType type, Stage stage, bool accepted) {
    std::lock_guard lock(mu_);
    auto& c = counts_[{type, stage}];
    ++c.generated;
    if (accepted) ++c.accepted;
  }

  void record_leak(QueryType type) {
    std::lock_guard lock(mu_);
    ++counts_[{type, Stage::kChecker}].leaked;
  }

  /// Records a checker verdict, routing local leakage rejections to their column.
  void record_verdict(QueryType type, const CheckerVerdict& v) {
    if (v.leaked) {
      record_leak(type);
    } else {
      record_outcome(type, Stage::kChecker, v.accepted);
    }
  }

  StageCounts counts(QueryType type, Stage stage) const {
    std::lock_guard lock(mu_);
    const auto it = counts_.find({type, stage});
    return it == counts_.end() ? StageCounts{} : it->second;
  }

  nlohmann::json to_json() const {
    std::lock_guard lock(mu_);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [key, c] : counts_) {
      j.push_back({{"intention_type", to_string(key.first)},
                   {"stage", to_string(key.second)},
                   {"generated", c.generated},
                   {"accepted", c.accepted},
                   {"leaked", c.leaked},
                   {"pass_rate", format_pass_rate(c)}});
    }
    return j;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::pair<QueryType, Stage>, StageCounts> counts_;
};

/// Runs the checker over every sentence of a set and books the verdicts.
inline CheckedCandidateSet check_candidates(const CandidateSet& set, ChatBackend& backend,
                                            const PromptTemplate& tmpl = default_checker_template(),
                                            PassRateLedger* ledger = nullptr) {
  CheckedCandidateSet out{set, {}};
  for (const auto& sentence : set.sentences) {
    out.verdicts.push_back(check_sentence(sentence, set.object_category, set.intention_type, backend, tmpl));
    if (ledger) ledger->record_verdict(set.intention_type, out.verdicts.back());
  }
  return out;
}

}  // namespace egoground
