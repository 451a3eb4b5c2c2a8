#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "egoground/dataset.hpp"
#include "egoground/error.hpp"
#include "egoground/hash.hpp"
#include "egoground/metrics.hpp"
#include "egoground/orchestrator.hpp"
#include "json.hpp"

namespace egoground {

enum class GtMode { kPrimaryOnly, kWithAlternatives };

inline std::string_view to_string(GtMode m) {
  return m == GtMode::kPrimaryOnly ? "primary_only" : "with_alternatives";
}

inline GtMode parse_gt_mode(std::string_view s) {
  if (s == "primary_only") return GtMode::kPrimaryOnly;
  if (s == "with_alternatives") return GtMode::kWithAlternatives;
  throw Error(ErrorCode::kInvalidInput, "unknown gt_mode '" + std::string(s) + "'");
}

struct EvalConfig {
  std::vector<double> thresholds{0.3, 0.5};
  bool strict = true;
  GtMode gt_mode = GtMode::kWithAlternatives;
  std::set<Split> splits{Split::kTest};
  std::set<QueryType> query_types{QueryType::kContext, QueryType::kUncommon};
  bool best_of_all = false;  // score the best of all parsed boxes instead of the first

  void validate() const {
    if (thresholds.empty()) throw Error(ErrorCode::kInvalidInput, "no thresholds");
    for (double t : thresholds) {
      if (!(t > 0.0 && t < 1.0)) throw Error(ErrorCode::kInvalidInput, "thresholds must lie in (0,1)");
    }
    if (splits.empty() || query_types.empty()) throw Error(ErrorCode::kInvalidInput, "empty selection");
  }

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

inline nlohmann::json to_json_value(const EvalConfig& c) {
  std::vector<std::string> splits, types;
  for (auto s : c.splits) splits.emplace_back(to_string(s));
  for (auto t : c.query_types) types.emplace_back(to_string(t));
  return {{"thresholds", c.thresholds}, {"strict", c.strict},         {"gt_mode", to_string(c.gt_mode)},
          {"splits", splits},           {"query_types", types},       {"best_of_all", c.best_of_all}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  if (j.contains("thresholds")) c.thresholds = j["thresholds"].get<std::vector<double>>();
  c.strict = j.value("strict", c.strict);
  if (j.contains("gt_mode")) c.gt_mode = parse_gt_mode(j["gt_mode"].get<std::string>());
  if (j.contains("splits")) {
    c.splits.clear();
    for (const auto& s : j["splits"]) c.splits.insert(parse_split(s.get<std::string>()));
  }
  if (j.contains("query_types")) {
    c.query_types.clear();
    for (const auto& t : j["query_types"]) c.query_types.insert(parse_query_type(t.get<std::string>()));
  }
  c.best_of_all = j.value("best_of_all", c.best_of_all);
  c.validate();
  return c;
}

inline EvalConfig load_eval_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kLoad, "cannot open eval config " + path.string());
  try {
    return eval_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
  }
}

using CellKey = std::pair<Split, QueryType>;

struct Provenance {
  std::string predictions_sha256;
  std::string manifest_sha256;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Metrics per (split, query type), the per-split overall row, and the
/// overall figure pooled across the selected splits. Overall values always
/// come from aggregate_overall over context and uncommon only.
struct EvalReport {
  EvalConfig config;
  std::map<CellKey, MetricReport> cells;  // nonempty groups only
  std::map<Split, MetricReport> overall_by_split;
  std::optional<MetricReport> overall;
  Provenance provenance;
  std::size_t missing_predictions = 0;
  std::vector<std::string> warnings;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Scores predictions against the manifest. Predictions for unknown records
/// are a hard error; selected records without a prediction score 0 and are
/// counted in `missing_predictions`.
inline EvalReport evaluate(const std::vector<Prediction>& predictions, const Manifest& manifest,
                           const EvalConfig& cfg) {
  cfg.validate();
  EvalReport report;
  report.config = cfg;

  std::unordered_map<std::string, const IntentionRecord*> by_id;
  for (const auto& r : manifest.records) by_id.emplace(r.record_id, &r);
  std::unordered_map<std::string, const Prediction*> pred_by_id;
  for (const auto& p : predictions) {
    if (!by_id.count(p.record_id)) {
      throw Error(ErrorCode::kInvalidInput, "prediction for unknown record_id '" + p.record_id + "'");
    }
    if (!pred_by_id.emplace(p.record_id, &p).second) {
      throw Error(ErrorCode::kInvalidInput, "duplicate prediction for '" + p.record_id + "'");
    }
  }

  const bool with_alts = cfg.gt_mode == GtMode::kWithAlternatives;
  std::map<CellKey, std::vector<ScoredSample>> groups;
  for (const auto& r : manifest.records) {
    if (!cfg.splits.count(r.split) || !cfg.query_types.count(r.query_type)) continue;
    auto& bucket = groups[{r.split, r.query_type}];
    const auto it = pred_by_id.find(r.record_id);
    if (it == pred_by_id.end()) {
      ++report.missing_predictions;
      bucket.push_back(ScoredSample::unparseable(r.record_id));
      continue;
    }
    const auto gts = r.ground_truth(with_alts);
    const Prediction& p = *it->second;
    ScoredSample best = score_sample(r.record_id, p.box, gts);
    if (cfg.best_of_all) {
      for (const auto& b : p.boxes) {
        auto s = score_sample(r.record_id, b, gts);
        if (s.best_iou > best.best_iou) best = s;
      }
    }
    bucket.push_back(std::move(best));
  }
  if (report.missing_predictions) {
    report.warnings.push_back(std::to_string(report.missing_predictions) +
                              " selected record(s) had no prediction and scored 0");
  }

  std::map<QueryType, std::vector<ScoredSample>> pooled;
  for (const auto& [key, samples] : groups) {
    report.cells[key] = make_report(samples, cfg.thresholds, cfg.strict);
    auto& pool = pooled[key.second];
    pool.insert(pool.end(), samples.begin(), samples.end());
  }
  for (auto split : cfg.splits) {
    const auto c = report.cells.find({split, QueryType::kContext});
    const auto u = report.cells.find({split, QueryType::kUncommon});
    if (c != report.cells.end() && u != report.cells.end()) {
      report.overall_by_split[split] = aggregate_overall(c->second, u->second);
    }
  }
  if (pooled.count(QueryType::kContext) && pooled.count(QueryType::kUncommon)) {
    report.overall = aggregate_overall(make_report(pooled[QueryType::kContext], cfg.thresholds, cfg.strict),
                                       make_report(pooled[QueryType::kUncommon], cfg.thresholds, cfg.strict));
  }
  return report;
}

/// File-level wrapper that records input hashes. When `previous` is given and
/// its provenance differs, a warning is attached.
inline EvalReport evaluate_files(const std::filesystem::path& predictions_path,
                                 const std::filesystem::path& manifest_path, const EvalConfig& cfg,
                                 const std::optional<EvalReport>& previous = std::nullopt) {
  const auto pred_bytes = read_file(predictions_path);
  const auto manifest_bytes = read_file(manifest_path);
  std::istringstream pin(pred_bytes), min(manifest_bytes);
  auto report = evaluate(read_predictions(pin, predictions_path.string()),
                         read_manifest(min, manifest_path.string()), cfg);
  report.provenance = {sha256_hex(pred_bytes), sha256_hex(manifest_bytes)};
  if (previous && previous->provenance != report.provenance) {
    report.warnings.push_back("input hashes differ from the previous report's provenance");
  }
  return report;
}

// ---------------------------------------------------------------------------
// Rendering

enum class ReportFormat { kTextTable, kCsv, kStructured };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "text" || s == "text-table") return ReportFormat::kTextTable;
  if (s == "csv") return ReportFormat::kCsv;
  if (s == "structured" || s == "json") return ReportFormat::kStructured;
  throw Error(ErrorCode::kInvalidInput, "unknown report format '" + std::string(s) + "'");
}

namespace detail {

inline std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kLoad, "bad number '" + std::string(s) + "'");
  }
  return v;
}

inline std::string pad(std::string s, std::size_t width, bool right = true) {
  // "—" is three bytes but one column wide.
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
  if (cols >= width) return s;
  return right ? std::string(width - cols, ' ') + s : s + std::string(width - cols, ' ');
}

inline double headline_threshold(const EvalConfig& c) {
  for (double t : c.thresholds) {
    if (t == 0.5) return t;
  }
  return c.thresholds.back();
}

inline nlohmann::json metric_json(const MetricReport& m) {
  nlohmann::json p = nlohmann::json::array();
  for (const auto& [t, v] : m.precision_at) p.push_back({t, v});
  return {{"n_samples", m.n_samples}, {"precision_at", p}, {"miou", m.miou}};
}

inline MetricReport metric_from_json(const nlohmann::json& j) {
  MetricReport m;
  m.n_samples = j.at("n_samples").get<std::size_t>();
  for (const auto& pair : j.at("precision_at")) m.precision_at[pair.at(0).get<double>()] = pair.at(1).get<double>();
  m.miou = j.at("miou").get<double>();
  return m;
}

}  // namespace detail

inline std::string render_text_table(const EvalReport& r) {
  const auto& cfg = r.config;
  const double headline = detail::headline_threshold(cfg);
  std::vector<QueryType> types(cfg.query_types.begin(), cfg.query_types.end());
  const std::size_t metric_w = 8;
  const std::size_t group_w = metric_w * (cfg.thresholds.size() + 1);

  const auto group_title = [](QueryType t) {
    std::string name(to_string(t));
    name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    return name + " Split";
  };
  const std::string overall_title = "Overall P@" + detail::shortest(headline);

  std::ostringstream os;
  os << detail::pad("Split", 6, false) << " |";
  for (auto t : types) os << detail::pad(group_title(t), group_w) << " |";
  os << ' ' << overall_title << '\n';
  os << std::string(6, ' ') << " |";
  for (std::size_t i = 0; i < types.size(); ++i) {
    for (double t : cfg.thresholds) os << detail::pad("P@" + detail::shortest(t), metric_w);
    os << detail::pad("mIoU", metric_w) << " |";
  }
  os << '\n';

  const auto row = [&](const std::string& label, const std::map<QueryType, const MetricReport*>& cells,
                       const MetricReport* overall) {
    os << detail::pad(label, 6, false) << " |";
    for (auto t : types) {
      const auto it = cells.find(t);
      const MetricReport* m = it == cells.end() ? nullptr : it->second;
      for (double th : cfg.thresholds) {
        os << detail::pad(m ? format_percent(m->precision_at.at(th)) : "—", metric_w);
      }
      os << detail::pad(m ? format_fixed(m->miou, 4) : "—", metric_w) << " |";
    }
    os << ' ' << detail::pad(overall ? format_percent(overall->precision_at.at(headline)) : "—", overall_title.size())
       << '\n';
  };

  for (auto split : cfg.splits) {
    std::map<QueryType, const MetricReport*> cells;
    for (auto t : types) {
      const auto it = r.cells.find({split, t});
      if (it != r.cells.end()) cells[t] = &it->second;
    }
    const auto o = r.overall_by_split.find(split);
    row(std::string(to_string(split)), cells, o == r.overall_by_split.end() ? nullptr : &o->second);
  }
  if (cfg.splits.size() > 1) row("all", {}, r.overall ? &*r.overall : nullptr);
  os << "gt_mode=" << to_string(cfg.gt_mode) << " strict=" << (cfg.strict ? "true" : "false");
  if (r.missing_predictions) os << " missing=" << r.missing_predictions;
  os << '\n';
  return os.str();
}

/// One metric per row at full precision; configuration, provenance and
/// warnings travel as leading "# key=value" comment lines.
inline std::string render_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "# config=" << to_json_value(r.config).dump() << '\n';
  os << "# predictions_sha256=" << r.provenance.predictions_sha256 << '\n';
  os << "# manifest_sha256=" << r.provenance.manifest_sha256 << '\n';
  os << "# missing_predictions=" << r.missing_predictions << '\n';
  for (const auto& w : r.warnings) os << "# warning=" << w << '\n';
  os << "split,query_type,n_samples,metric,value\n";
  const auto emit = [&](std::string_view split, std::string_view type, const MetricReport& m) {
    for (const auto& [t, v] : m.precision_at) {
      os << split << ',' << type << ',' << m.n_samples << ",P@" << detail::shortest(t) << ','
         << detail::shortest(v) << '\n';
    }
    os << split << ',' << type << ',' << m.n_samples << ",mIoU," << detail::shortest(m.miou) << '\n';
  };
  for (const auto& [key, m] : r.cells) emit(to_string(key.first), to_string(key.second), m);
  for (const auto& [split, m] : r.overall_by_split) emit(to_string(split), "overall", m);
  if (r.overall) emit("all", "overall", *r.overall);
  return os.str();
}

inline EvalReport parse_csv_report(std::string_view text) {
  EvalReport r;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(2, eq - 2);
      const auto value = line.substr(eq + 1);
      if (key == "config") {
        r.config = eval_config_from_json(nlohmann::json::parse(value));
      } else if (key == "predictions_sha256") {
        r.provenance.predictions_sha256 = value;
      } else if (key == "manifest_sha256") {
        r.provenance.manifest_sha256 = value;
      } else if (key == "missing_predictions") {
        r.missing_predictions = static_cast<std::size_t>(std::stoull(value));
      } else if (key == "warning") {
        r.warnings.push_back(value);
      }
      continue;
    }
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw Error(ErrorCode::kLoad, "bad report row '" + line + "'");
    MetricReport* m;
    if (f[1] == "overall") {
      if (f[0] == "all") {
        if (!r.overall) r.overall.emplace();
        m = &*r.overall;
      } else {
        m = &r.overall_by_split[parse_split(f[0])];
      }
    } else {
      m = &r.cells[{parse_split(f[0]), parse_query_type(f[1])}];
    }
    m->n_samples = static_cast<std::size_t>(std::stoull(f[2]));
    const double v = detail::parse_double(f[4]);
    if (f[3] == "mIoU") {
      m->miou = v;
    } else if (f[3].rfind("P@", 0) == 0) {
      m->precision_at[detail::parse_double(std::string_view(f[3]).substr(2))] = v;
    } else {
      throw Error(ErrorCode::kLoad, "unknown metric '" + f[3] + "'");
    }
  }
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [key, m] : r.cells) {
    auto j = detail::metric_json(m);
    j["split"] = to_string(key.first);
    j["query_type"] = to_string(key.second);
    cells.push_back(j);
  }
  nlohmann::json by_split = nlohmann::json::object();
  for (const auto& [split, m] : r.overall_by_split) by_split[std::string(to_string(split))] = detail::metric_json(m);
  return {{"config", to_json_value(r.config)},
          {"cells", cells},
          {"overall_by_split", by_split},
          {"overall", r.overall ? detail::metric_json(*r.overall) : nlohmann::json()},
          {"provenance",
           {{"predictions_sha256", r.provenance.predictions_sha256},
            {"manifest_sha256", r.provenance.manifest_sha256}}},
          {"missing_predictions", r.missing_predictions},
          {"warnings", r.warnings}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.config = eval_config_from_json(j.at("config"));
  for (const auto& c : j.at("cells")) {
    r.cells[{parse_split(c.at("split").get<std::string>()), parse_query_type(c.at("query_type").get<std::string>())}] =
        detail::metric_from_json(c);
  }
  for (const auto& [split, m] : j.at("overall_by_split").items()) r.overall_by_split[parse_split(split)] = detail::metric_from_json(m);
  if (!j.at("overall").is_null()) r.overall = detail::metric_from_json(j["overall"]);
  r.provenance = {j.at("provenance").at("predictions_sha256").get<std::string>(),
                  j.at("provenance").at("manifest_sha256").get<std::string>()};
  r.missing_predictions = j.value("missing_predictions", std::size_t{0});
  r.warnings = j.value("warnings", std::vector<std::string>{});
  return r;
}

inline std::string render_report(const EvalReport& r, ReportFormat format) {
  switch (format) {
    case ReportFormat::kTextTable: return render_text_table(r);
    case ReportFormat::kCsv: return render_csv(r);
    case ReportFormat::kStructured: return report_to_json(r).dump(2) + "\n";
  }
  return {};
}

/// Reads a report previously written in csv or structured form.
inline EvalReport load_report(const std::filesystem::path& path) {
  const auto text = read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  try {
    if (first != std::string::npos && text[first] == '{') return report_from_json(nlohmann::json::parse(text));
    return parse_csv_report(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kLoad, path.string() + ": " + e.what());
  }
}

}  // namespace egoground
