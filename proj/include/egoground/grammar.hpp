#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "egoground/error.hpp"
#include "egoground/geometry.hpp"
#include "json.hpp"

namespace egoground {

/// Token format a grounding model uses for boxes and task identifiers.
///
/// `coord_pattern` is the text between `box_open` and `box_close`, with the
/// placeholders {x1} {y1} {x2} {y2} standing for integer bins in that order.
/// Whitespace in the model output is tolerated around every token.
struct GrammarSpec {
  std::string name;
  std::string box_open;
  std::string box_close;
  std::string coord_pattern;
  int scale = 100;
  std::string reason_token = "<reason>";
  std::string ref_token = "<ref>";

  friend bool operator==(const GrammarSpec&, const GrammarSpec&) = default;
};

enum class ParseStatus { kOk, kNoBoxFound, kOutOfRange, kMalformed };

inline std::string_view to_string(ParseStatus s) {
  switch (s) {
    case ParseStatus::kOk: return "ok";
    case ParseStatus::kNoBoxFound: return "no_box_found";
    case ParseStatus::kOutOfRange: return "out_of_range";
    case ParseStatus::kMalformed: return "malformed";
  }
  return "malformed";
}

struct ParsedOutput {
  std::vector<BBox> boxes;  // empty unless status == kOk
  std::string raw_text;
  ParseStatus status = ParseStatus::kNoBoxFound;
};

/// Curly-brace coordinate tokens on a 100-bin grid: {<x1><y1><x2><y2>}.
inline GrammarSpec curly_100_preset() {
  return {"curly-100", "{", "}", "<{x1}><{y1}><{x2}><{y2}>", 100, "<reason>", "<ref>"};
}

/// Parenthesized corner pairs on a 1000-bin grid: <box>(x1,y1),(x2,y2)</box>.
inline GrammarSpec paren_1000_preset() {
  return {"paren-1000", "<box>", "</box>", "({x1},{y1}),({x2},{y2})", 1000, "<reason>", "<ref>"};
}

inline void to_json(nlohmann::json& j, const GrammarSpec& g) {
  j = {{"name", g.name},           {"box_open", g.box_open},
       {"box_close", g.box_close}, {"coord_pattern", g.coord_pattern},
       {"scale", g.scale},         {"reason_token", g.reason_token},
       {"ref_token", g.ref_token}};
}

inline void from_json(const nlohmann::json& j, GrammarSpec& g) {
  g.name = j.at("name").get<std::string>();
  g.box_open = j.at("box_open").get<std::string>();
  g.box_close = j.at("box_close").get<std::string>();
  g.coord_pattern = j.at("coord_pattern").get<std::string>();
  g.scale = j.at("scale").get<int>();
  g.reason_token = j.value("reason_token", std::string("<reason>"));
  g.ref_token = j.value("ref_token", std::string("<ref>"));
}

/// A validated GrammarSpec with its coordinate pattern pre-split into
/// literal and numeric slots. Immutable and freely shareable.
class Grammar {
 public:
  explicit Grammar(GrammarSpec spec) : spec_(std::move(spec)) {
    if (spec_.scale < 2) throw Error(ErrorCode::kInvalidInput, "grammar scale must be >= 2");
    if (spec_.box_open.empty() || spec_.box_close.empty() || spec_.box_open == spec_.box_close) {
      throw Error(ErrorCode::kInvalidInput, "box delimiters must be nonempty and distinct");
    }
    if (spec_.reason_token == spec_.ref_token) {
      throw Error(ErrorCode::kInvalidInput, "reason and ref tokens must differ");
    }
    compile();
  }

  const GrammarSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  int scale() const { return spec_.scale; }

  /// Low corners quantize with floor, high corners with ceil, so the decoded
  /// box always encloses the original and never collapses to zero bins.
  std::array<int, 4> quantize(const BBox& b, const ImageSize& size) const {
    if (!size.valid()) throw Error(ErrorCode::kInvalidInput, "invalid image size");
    if (!b.valid() || !within(b, size)) {
      throw Error(ErrorCode::kInvalidInput, "box " + to_string(b) + " outside image");
    }
    const auto lo = [&](double c, int extent) {
      return std::clamp(static_cast<int>(std::floor(c * spec_.scale / extent + kEps)), 0,
                        spec_.scale);
    };
    const auto hi = [&](double c, int extent) {
      return std::clamp(static_cast<int>(std::ceil(c * spec_.scale / extent - kEps)), 0,
                        spec_.scale);
    };
    return {lo(b.x1, size.width), lo(b.y1, size.height), hi(b.x2, size.width),
            hi(b.y2, size.height)};
  }

  BBox dequantize(const std::array<int, 4>& bins, const ImageSize& size) const {
    const double s = spec_.scale;
    return {bins[0] * size.width / s, bins[1] * size.height / s, bins[2] * size.width / s,
            bins[3] * size.height / s};
  }

  std::string format_bins(const std::array<int, 4>& bins) const {
    std::string out = spec_.box_open;
    for (const auto& slot : slots_) {
      if (slot.coord < 0) {
        out += slot.literal;
      } else {
        out += std::to_string(bins[slot.coord]);
      }
    }
    out += spec_.box_close;
    return out;
  }

  std::string serialize_box(const BBox& b, const ImageSize& size) const {
    return format_bins(quantize(b, size));
  }

  /// Extracts every box occurrence in order. Never throws on model text; any
  /// failing occurrence sets the status to the first failure class seen and
  /// leaves `boxes` empty.
  ParsedOutput parse_boxes(std::string_view text, const ImageSize& size) const {
    ParsedOutput out;
    out.raw_text = std::string(text);
    std::vector<BBox> boxes;
    std::optional<ParseStatus> failure;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const std::size_t open = text.find(spec_.box_open, pos);
      if (open == std::string_view::npos) break;
      const std::size_t inner_begin = open + spec_.box_open.size();
      const std::size_t close = text.find(spec_.box_close, inner_begin);
      if (close == std::string_view::npos) break;
      pos = close + spec_.box_close.size();

      std::array<long long, 4> raw{};
      const auto m = match_inner(text.substr(inner_begin, close - inner_begin), raw);
      ParseStatus st = m;
      std::array<int, 4> bins{};
      if (st == ParseStatus::kOk) {
        for (int i = 0; i < 4; ++i) {
          if (raw[i] > spec_.scale) st = ParseStatus::kOutOfRange;
          bins[i] = static_cast<int>(std::min<long long>(raw[i], spec_.scale));
        }
      }
      if (st == ParseStatus::kOk && (bins[2] <= bins[0] || bins[3] <= bins[1])) {
        st = ParseStatus::kMalformed;
      }
      if (st != ParseStatus::kOk) {
        if (!failure) failure = st;
        continue;
      }
      if (!size.valid()) {
        if (!failure) failure = ParseStatus::kOutOfRange;
        continue;
      }
      boxes.push_back(dequantize(bins, size));
    }
    if (failure) {
      out.status = *failure;
    } else if (boxes.empty()) {
      out.status = ParseStatus::kNoBoxFound;
    } else {
      out.status = ParseStatus::kOk;
      out.boxes = std::move(boxes);
    }
    return out;
  }

  /// "{token} {text}", the prompt shape for both task tokens.
  std::string reason_prompt(std::string_view text) const {
    return spec_.reason_token + " " + std::string(text);
  }
  std::string ref_prompt(std::string_view text) const {
    return spec_.ref_token + " " + std::string(text);
  }

 private:
  static constexpr double kEps = 1e-9;
  static constexpr std::size_t kMaxDigits = 9;

  struct Slot {
    std::string literal;  // used when coord < 0
    int coord = -1;
  };

  void compile() {
    static constexpr std::array<std::string_view, 4> kNames{"{x1}", "{y1}", "{x2}", "{y2}"};
    std::string_view p = spec_.coord_pattern;
    std::size_t pos = 0;
    for (int c = 0; c < 4; ++c) {
      const std::size_t at = p.find(kNames[c], pos);
      if (at == std::string_view::npos) {
        throw Error(ErrorCode::kInvalidInput,
                    "coord_pattern must contain {x1} {y1} {x2} {y2} in order");
      }
      if (at > pos) slots_.push_back({std::string(p.substr(pos, at - pos)), -1});
      slots_.push_back({"", c});
      pos = at + kNames[c].size();
    }
    if (pos < p.size()) slots_.push_back({std::string(p.substr(pos)), -1});
    for (auto name : kNames) {
      if (p.find(name, p.find(name) + 1) != std::string_view::npos) {
        throw Error(ErrorCode::kInvalidInput, "coord_pattern repeats a placeholder");
      }
    }
  }

  ParseStatus match_inner(std::string_view s, std::array<long long, 4>& out) const {
    std::size_t i = 0;
    const auto skip_ws = [&] {
      while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    };
    for (const auto& slot : slots_) {
      if (slot.coord < 0) {
        for (char c : slot.literal) {
          if (std::isspace(static_cast<unsigned char>(c))) continue;
          skip_ws();
          if (i >= s.size() || s[i] != c) return ParseStatus::kMalformed;
          ++i;
        }
      } else {
        skip_ws();
        const std::size_t start = i;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        if (i == start) return ParseStatus::kMalformed;
        if (i - start > kMaxDigits) {
          out[slot.coord] = static_cast<long long>(spec_.scale) + 1;
        } else {
          std::from_chars(s.data() + start, s.data() + i, out[slot.coord]);
        }
      }
    }
    skip_ws();
    if (i != s.size()) return ParseStatus::kMalformed;
    return ParseStatus::kOk;
  }

  GrammarSpec spec_;
  std::vector<Slot> slots_;
};

inline Grammar load_grammar(const std::string& name_or_path) {
  if (name_or_path == "curly-100") return Grammar(curly_100_preset());
  if (name_or_path == "paren-1000") return Grammar(paren_1000_preset());
  std::ifstream in(name_or_path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open grammar config " + name_or_path);
  try {
    return Grammar(nlohmann::json::parse(in).get<GrammarSpec>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kLoad, name_or_path + ": " + e.what());
  }
}

/// Normalizes a free-text category reply: first list item (split on comma,
/// semicolon, newline) that contains a letter, trimmed of whitespace and
/// sentence punctuation, lowercased.
inline std::string extract_category(std::string_view text) {
  const auto is_trim = [](unsigned char c) {
    return std::isspace(c) || c == '.' || c == ',' || c == ';' || c == ':' || c == '!' ||
           c == '?' || c == '"' || c == '\'' || c == '`' || c == '*';
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find_first_of(",;\n", pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view item = text.substr(pos, end - pos);
    while (!item.empty() && is_trim(static_cast<unsigned char>(item.front()))) item.remove_prefix(1);
    while (!item.empty() && is_trim(static_cast<unsigned char>(item.back()))) item.remove_suffix(1);
    const bool has_alpha = std::any_of(item.begin(), item.end(), [](char c) {
      return std::isalpha(static_cast<unsigned char>(c));
    });
    if (has_alpha) {
      std::string out(item);
      std::transform(out.begin(), out.end(), out.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      return out;
    }
    pos = end + 1;
  }
  throw Error(ErrorCode::kEmptyCategory, "no alphabetic content in reply");
}

/// Splits a reply into normalized list items (each passed through
/// extract_category); items without letters are dropped.
inline std::vector<std::string> extract_categories(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find_first_of(",;\n", pos);
    if (end == std::string_view::npos) end = text.size();
    try {
      out.push_back(extract_category(text.substr(pos, end - pos)));
    } catch (const Error&) {
    }
    pos = end + 1;
  }
  return out;
}

}  // namespace egoground
