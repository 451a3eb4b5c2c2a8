#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <utility>

#include "egoground/error.hpp"

namespace egoground {

/// Axis-aligned box in pixel space, origin top-left, half-open corners:
/// area = (x2 - x1) * (y2 - y1).
struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }

  /// Finite, non-negative corners and strictly positive area.
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x1 >= 0.0 && y1 >= 0.0 && x2 > x1 && y2 > y1;
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline std::string to_string(const BBox& b) {
  std::ostringstream os;
  os << "(" << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2 << ")";
  return os.str();
}

struct ImageSize {
  int width = 0;
  int height = 0;

  bool valid() const { return width >= 1 && height >= 1; }
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

inline bool within(const BBox& b, const ImageSize& size) {
  return b.x2 <= size.width && b.y2 <= size.height;
}

inline void require_valid(const BBox& b) {
  if (!b.valid()) {
    throw Error(ErrorCode::kInvalidInput, "degenerate or non-finite box " + to_string(b));
  }
}

/// Intersection over union. Both boxes must be valid.
inline double iou(const BBox& a, const BBox& b) {
  require_valid(a);
  require_valid(b);
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

struct Match {
  double best_iou = 0.0;
  std::size_t index = 0;
};

/// Max IoU of `pred` against every ground-truth box; ties go to the lowest index.
inline Match best_match(const BBox& pred, std::span<const BBox> gts) {
  if (gts.empty()) throw Error(ErrorCode::kInvalidInput, "empty ground-truth list");
  Match m;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const double v = iou(pred, gts[i]);
    if (i == 0 || v > m.best_iou) m = {v, i};
  }
  return m;
}

inline BBox clamp_to_image(const BBox& b, const ImageSize& size) {
  if (!size.valid()) throw Error(ErrorCode::kInvalidInput, "invalid image size");
  const double w = size.width;
  const double h = size.height;
  BBox c{std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
         std::clamp(b.y2, 0.0, h)};
  if (!c.valid()) {
    throw Error(ErrorCode::kDegenerateAfterClamp, to_string(b) + " collapses inside image");
  }
  return c;
}

}  // namespace egoground
