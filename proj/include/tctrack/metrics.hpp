#pragma once

// One-pass evaluation metrics.
//   precision curve: fraction of frames with CLE <= t, t = 0..50 px; scalar at 20 px
//   normalized precision: CLE / sqrt(w h) of the GT box, thresholds 0..0.5 step 0.01;
//                         scalar is the mean of that curve
//   success curve: fraction of frames with IoU >= t, t = 0, 0.05, ..., 1; AUC is its mean
//   AO: mean IoU; SR_x: fraction of frames with IoU > x

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "tctrack/box.hpp"

namespace tctrack {

enum class EvalMode { Offline, Online };

inline std::string to_string(EvalMode m) { return m == EvalMode::Offline ? "offline" : "online"; }

inline constexpr int kPrecisionMaxPx = 50;
inline constexpr double kPrecisionAtPx = 20.0;
inline constexpr int kNormPrecisionSteps = 50;  // 0..0.5 in 0.01 steps
inline constexpr int kSuccessSteps = 20;        // 0..1 in 0.05 steps

inline std::vector<double> precision_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= kPrecisionMaxPx; ++i) t.push_back(i);
  return t;
}
inline std::vector<double> norm_precision_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= kNormPrecisionSteps; ++i) t.push_back(i / 100.0);
  return t;
}
inline std::vector<double> success_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= kSuccessSteps; ++i) t.push_back(i / 20.0);
  return t;
}

struct MetricsReport {
  EvalMode mode = EvalMode::Offline;
  std::size_t frames = 0;
  double precision = 0.0;  // at 20 px
  double norm_precision = 0.0;
  double success_auc = 0.0;
  double ao = 0.0;
  double sr50 = 0.0;
  double sr75 = 0.0;
  double mean_fps = 0.0;  // 0 when no timing was supplied
  std::vector<double> precision_curve;
  std::vector<double> norm_precision_curve;
  std::vector<double> success_curve;
  std::vector<double> per_frame_iou;
  std::vector<double> per_frame_cle;
};

/// Metric fields only: mode and timing are left out.
inline bool same_scores(const MetricsReport& a, const MetricsReport& b) {
  return a.frames == b.frames && a.precision == b.precision && a.norm_precision == b.norm_precision &&
         a.success_auc == b.success_auc && a.ao == b.ao && a.sr50 == b.sr50 && a.sr75 == b.sr75 &&
         a.precision_curve == b.precision_curve && a.norm_precision_curve == b.norm_precision_curve &&
         a.success_curve == b.success_curve && a.per_frame_iou == b.per_frame_iou &&
         a.per_frame_cle == b.per_frame_cle;
}

inline MetricsReport compute_metrics(const std::vector<BoundingBox>& predictions, const std::vector<BoundingBox>& gts,
                                     EvalMode mode) {
  if (predictions.empty() || gts.empty()) throw std::invalid_argument("compute_metrics: empty input");
  if (predictions.size() != gts.size())
    throw std::invalid_argument("compute_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(gts.size()) + " ground-truth boxes");
  MetricsReport r;
  r.mode = mode;
  r.frames = gts.size();
  const double n = static_cast<double>(gts.size());
  std::vector<double> norm;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    r.per_frame_iou.push_back(iou(predictions[i], gts[i]));
    r.per_frame_cle.push_back(center_error(predictions[i], gts[i]));
    norm.push_back(r.per_frame_cle.back() / std::sqrt(gts[i].w * gts[i].h));
  }
  auto rate = [&](const std::vector<double>& v, auto pred) {
    std::size_t c = 0;
    for (double x : v) c += pred(x) ? 1 : 0;
    return static_cast<double>(c) / n;
  };
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  for (double t : precision_thresholds()) r.precision_curve.push_back(rate(r.per_frame_cle, [t](double e) { return e <= t; }));
  for (double t : norm_precision_thresholds())
    r.norm_precision_curve.push_back(rate(norm, [t](double e) { return e <= t; }));
  for (double t : success_thresholds()) r.success_curve.push_back(rate(r.per_frame_iou, [t](double o) { return o >= t; }));
  r.precision = rate(r.per_frame_cle, [](double e) { return e <= kPrecisionAtPx; });
  r.norm_precision = mean(r.norm_precision_curve);
  r.success_auc = mean(r.success_curve);
  r.ao = mean(r.per_frame_iou);
  r.sr50 = rate(r.per_frame_iou, [](double o) { return o > 0.5; });
  r.sr75 = rate(r.per_frame_iou, [](double o) { return o > 0.75; });
  return r;
}

/// frames / total seconds; 0 if the total is zero.
inline double mean_fps(const std::vector<double>& latency_ms) {
  double total = 0.0;
  for (double v : latency_ms) total += v;
  return total > 0.0 ? 1000.0 * static_cast<double>(latency_ms.size()) / total : 0.0;
}

}  // namespace tctrack
