#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "egoground/error.hpp"
#include "egoground/geometry.hpp"

namespace egoground {

/// One prediction scored against its ground-truth set. A missing
/// `matched_gt_index` marks an unparseable prediction, which scores 0.
struct ScoredSample {
  std::string record_id;
  double best_iou = 0.0;
  std::optional<std::size_t> matched_gt_index;

  static ScoredSample unparseable(std::string id) { return {std::move(id), 0.0, std::nullopt}; }
};

inline ScoredSample score_sample(std::string record_id, const std::optional<BBox>& pred,
                                 std::span<const BBox> gts) {
  if (!pred || !pred->valid()) return ScoredSample::unparseable(std::move(record_id));
  const Match m = best_match(*pred, gts);
  return {std::move(record_id), m.best_iou, m.index};
}

struct MetricReport {
  std::size_t n_samples = 0;
  std::map<double, double> precision_at;  // threshold -> fraction in [0,1]
  double miou = 0.0;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> t{0.3, 0.5};
  return t;
}

/// Fraction of samples with best_iou > threshold (strict) or >= threshold.
inline double precision_at(std::span<const ScoredSample> samples, double threshold,
                           bool strict = true) {
  if (samples.empty()) throw Error(ErrorCode::kInvalidInput, "precision over no samples");
  std::size_t hits = 0;
  for (const auto& s : samples) {
    if (strict ? s.best_iou > threshold : s.best_iou >= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

inline double mean_iou(std::span<const ScoredSample> samples) {
  if (samples.empty()) throw Error(ErrorCode::kInvalidInput, "mean IoU over no samples");
  // Summing in sorted order makes the result bit-identical under any
  // permutation of the input; the compensated sum bounds drift on large splits.
  std::vector<double> values;
  values.reserve(samples.size());
  for (const auto& s : samples) values.push_back(s.best_iou);
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  double comp = 0.0;
  for (double v : values) {
    const double y = v - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return sum / static_cast<double>(samples.size());
}

inline MetricReport make_report(std::span<const ScoredSample> samples,
                                std::span<const double> thresholds, bool strict = true) {
  MetricReport r;
  r.n_samples = samples.size();
  for (double t : thresholds) r.precision_at[t] = precision_at(samples, t, strict);
  r.miou = mean_iou(samples);
  return r;
}

/// Unweighted mean of the context and uncommon split metrics.
inline MetricReport aggregate_overall(const MetricReport& context, const MetricReport& uncommon) {
  if (context.precision_at.size() != uncommon.precision_at.size()) {
    throw Error(ErrorCode::kInvalidInput, "threshold sets differ");
  }
  MetricReport out;
  out.n_samples = context.n_samples + uncommon.n_samples;
  for (const auto& [t, p] : context.precision_at) {
    auto it = uncommon.precision_at.find(t);
    if (it == uncommon.precision_at.end()) {
      throw Error(ErrorCode::kInvalidInput, "threshold sets differ");
    }
    out.precision_at[t] = (p + it->second) / 2.0;
  }
  out.miou = (context.miou + uncommon.miou) / 2.0;
  return out;
}

/// Round to `decimals` places, ties to even. Values within 1e-9 (relative to
/// the scaled magnitude) of a tie are treated as ties so binary noise such as
/// 17.249999999999996 still rounds as the decimal 17.25 would.
inline double round_half_even(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double scaled = value * scale;
  const double lower = std::floor(scaled);
  const double frac = scaled - lower;
  const double tol = 1e-9 * std::max(1.0, std::fabs(scaled));
  double rounded;
  if (std::fabs(frac - 0.5) <= tol) {
    rounded = std::fmod(lower, 2.0) == 0.0 ? lower : lower + 1.0;
  } else {
    rounded = std::nearbyint(scaled);
  }
  return rounded / scale;
}

inline std::string format_fixed(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, round_half_even(value, decimals));
  return buf;
}

/// Fraction rendered as a one-decimal percentage, e.g. 0.351 -> "35.1".
inline std::string format_percent(double fraction) { return format_fixed(fraction * 100.0, 1); }

}  // namespace egoground
