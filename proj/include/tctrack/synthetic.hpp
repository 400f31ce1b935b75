#pragma once

// Synthetic moving-square videos for desk-scale training and evaluation.

#include <cmath>
#include <vector>

#include "tctrack/training.hpp"

namespace tctrack {

struct SyntheticConfig {
  std::int64_t image_size = 96;
  double min_side = 16.0;
  double max_side = 22.0;
  double max_speed = 3.0;  // pixels per frame along each axis
  int frames = 8;
  double noise = 0.02;
  bool static_target = false;
};

/// Smooth colored background, a two-tone textured square moving at constant velocity
/// (reflecting off the borders), light pixel noise. Deterministic in seed.
inline Clip make_moving_square(std::uint64_t seed, const SyntheticConfig& cfg = {}) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise);
  const auto n = cfg.image_size;
  const double side = cfg.min_side + (cfg.max_side - cfg.min_side) * u(rng);
  double vx = cfg.static_target ? 0.0 : (u(rng) * 2.0 - 1.0) * cfg.max_speed;
  double vy = cfg.static_target ? 0.0 : (u(rng) * 2.0 - 1.0) * cfg.max_speed;
  const double margin = side / 2.0 + 2.0;
  double cx = margin + u(rng) * (static_cast<double>(n) - 2.0 * margin);
  double cy = margin + u(rng) * (static_cast<double>(n) - 2.0 * margin);

  double bg_base[3], bg_amp[3], fx[3], fy[3], ph[3], fg_a[3], fg_b[3];
  for (int c = 0; c < 3; ++c) {
    bg_base[c] = 0.25 + 0.2 * u(rng);
    bg_amp[c] = 0.1 + 0.1 * u(rng);
    fx[c] = 0.03 + 0.08 * u(rng);
    fy[c] = 0.03 + 0.08 * u(rng);
    ph[c] = 6.283 * u(rng);
    fg_a[c] = 0.75 + 0.25 * u(rng);
    fg_b[c] = 0.05 + 0.25 * u(rng);
  }

  Clip clip;
  for (int f = 0; f < cfg.frames; ++f) {
    Tensor img({3, n, n});
    const BoundingBox box{cx, cy, side, side};
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        const bool inside = px >= box.x1() && px < box.x2() && py >= box.y1() && py < box.y2();
        // Inner quadrant pattern gives the target texture.
        const bool quad = (px < cx) != (py < cy);
        for (int c = 0; c < 3; ++c) {
          double v = inside ? (quad ? fg_a[c] : fg_b[c])
                            : bg_base[c] + bg_amp[c] * std::sin(fx[c] * px + ph[c]) * std::cos(fy[c] * py);
          v += noise(rng);
          img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
        }
      }
    clip.frames.push_back(std::move(img));
    clip.boxes.push_back(box);
    cx += vx;
    cy += vy;
    if (cx < margin || cx > static_cast<double>(n) - margin) {
      vx = -vx;
      cx += 2 * vx;
    }
    if (cy < margin || cy > static_cast<double>(n) - margin) {
      vy = -vy;
      cy += 2 * vy;
    }
  }
  return clip;
}

inline std::vector<Clip> make_synthetic_dataset(std::size_t clips, int frames, std::uint64_t seed,
                                                SyntheticConfig cfg = {}) {
  cfg.frames = frames;
  std::vector<Clip> out;
  for (std::size_t i = 0; i < clips; ++i) out.push_back(make_moving_square(seed * 1000003ULL + i, cfg));
  return out;
}

}  // namespace tctrack
