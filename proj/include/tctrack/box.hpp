#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tctrack {

/// Axis-aligned box in image pixels, center format.
struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  static BoundingBox from_top_left(double x, double y, double w, double h) {
    return {x + w / 2.0, y + h / 2.0, w, h};
  }

  double x1() const { return cx - w / 2.0; }
  double y1() const { return cy - h / 2.0; }
  double x2() const { return cx + w / 2.0; }
  double y2() const { return cy + h / 2.0; }
  // Area from the corners so that IoU of a box with itself is exactly 1.
  double area() const { return (x2() - x1()) * (y2() - y1()); }

  bool valid() const { return w > 0.0 && h > 0.0 && std::isfinite(cx) && std::isfinite(cy); }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  return iw * ih;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Euclidean distance between centers (CLE).
inline double center_error(const BoundingBox& a, const BoundingBox& b) {
  const double dx = a.cx - b.cx, dy = a.cy - b.cy;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace tctrack
