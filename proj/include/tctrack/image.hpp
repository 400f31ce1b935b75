#pragma once

// RGB images as (3, H, W) tensors in [0, 1] and square crop windows.
//
// Crop coordinates are continuous: crop position u in [0, n] maps to image
// position cx + (u - n/2) * side / n. Image pixel i covers [i, i+1).

#include <cmath>

#include "tctrack/box.hpp"
#include "tctrack/tensor.hpp"

namespace tctrack {

struct CropWindow {
  double cx = 0.0;
  double cy = 0.0;
  double side = 1.0;         // in image pixels
  std::int64_t out_size = 1;  // in crop pixels

  double scale() const { return side / static_cast<double>(out_size); }

  BoundingBox to_crop(const BoundingBox& b) const {
    const double s = scale();
    const double half = static_cast<double>(out_size) / 2.0;
    return {(b.cx - cx) / s + half, (b.cy - cy) / s + half, b.w / s, b.h / s};
  }

  BoundingBox to_image(const BoundingBox& b) const {
    const double s = scale();
    const double half = static_cast<double>(out_size) / 2.0;
    return {cx + (b.cx - half) * s, cy + (b.cy - half) * s, b.w * s, b.h * s};
  }
};

/// sqrt((w + p)(h + p)) with p = (w + h) / 2: the context-padded template side.
inline double context_side(double w, double h) {
  const double p = (w + h) / 2.0;
  return std::sqrt((w + p) * (h + p));
}

inline CropWindow template_window(const BoundingBox& b, std::int64_t template_size) {
  return {b.cx, b.cy, context_side(b.w, b.h), template_size};
}

/// Search window at the template's pixel scale, so targets appear equally large in both patches.
inline CropWindow search_window(const BoundingBox& b, std::int64_t template_size, std::int64_t search_size) {
  const double sz = context_side(b.w, b.h);
  return {b.cx, b.cy, sz * static_cast<double>(search_size) / static_cast<double>(template_size), search_size};
}

/// Bilinear resampling of the window; samples outside the image take the per-channel image mean.
inline Tensor crop_patch(const Tensor& img, const CropWindow& win) {
  if (img.rank() != 3) throw DimensionError("crop_patch expects a (C,H,W) image, got " + shape_str(img.shape()));
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const auto n = win.out_size;
  std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::int64_t i = 0; i < h * w; ++i) s += img[static_cast<std::size_t>(ch * h * w + i)];
    mean[static_cast<std::size_t>(ch)] = s / static_cast<double>(h * w);
  }
  Tensor out({c, n, n});
  const double s = win.scale();
  const double half = static_cast<double>(n) / 2.0;
  auto sample = [&](std::int64_t ch, std::int64_t y, std::int64_t x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return mean[static_cast<std::size_t>(ch)];
    return img.at(ch, y, x);
  };
  for (std::int64_t v = 0; v < n; ++v) {
    const double py = win.cy + (static_cast<double>(v) + 0.5 - half) * s - 0.5;
    const auto y0 = static_cast<std::int64_t>(std::floor(py));
    const double fy = py - static_cast<double>(y0);
    for (std::int64_t u = 0; u < n; ++u) {
      const double px = win.cx + (static_cast<double>(u) + 0.5 - half) * s - 0.5;
      const auto x0 = static_cast<std::int64_t>(std::floor(px));
      const double fx = px - static_cast<double>(x0);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double top = sample(ch, y0, x0) * (1 - fx) + sample(ch, y0, x0 + 1) * fx;
        const double bot = sample(ch, y0 + 1, x0) * (1 - fx) + sample(ch, y0 + 1, x0 + 1) * fx;
        out.at(ch, v, u) = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

}  // namespace tctrack
