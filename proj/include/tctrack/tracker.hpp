#pragma once

// Sequences, the per-frame tracker interface and offline (latency-free) tracking.

#include <chrono>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "tctrack/image.hpp"
#include "tctrack/model.hpp"
#include "tctrack/training.hpp"

namespace tctrack {

/// Raised for malformed on-disk sequences.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sequence {
  std::string name;
  double fps = 30.0;
  std::vector<BoundingBox> groundtruth;  // center format
  std::vector<std::string> frame_paths;  // empty for in-memory sequences
  std::function<Tensor(std::size_t)> loader;

  std::size_t size() const { return groundtruth.size(); }
  Tensor frame(std::size_t i) const { return loader(i); }

  void validate() const {
    if (groundtruth.size() < 2) throw IngestionError("sequence '" + name + "' needs at least 2 frames");
    if (!(fps > 0.0)) throw IngestionError("sequence '" + name + "' needs fps > 0");
    if (!loader) throw IngestionError("sequence '" + name + "' has no frame loader");
    for (std::size_t i = 0; i < groundtruth.size(); ++i)
      if (!groundtruth[i].valid())
        throw IngestionError("sequence '" + name + "' frame " + std::to_string(i + 1) + " has a degenerate box");
  }

  static Sequence from_clip(Clip clip, std::string name, double fps = 30.0) {
    Sequence s;
    s.name = std::move(name);
    s.fps = fps;
    s.groundtruth = clip.boxes;
    auto frames = std::make_shared<std::vector<Tensor>>(std::move(clip.frames));
    s.loader = [frames](std::size_t i) { return frames->at(i); };
    return s;
  }
};

/// One tracker instance follows one sequence; frames arrive in increasing index order,
/// possibly with gaps when the online scheduler skips stale frames.
class FrameTracker {
 public:
  virtual ~FrameTracker() = default;
  virtual void init(const Tensor& frame, const BoundingBox& box) = 0;
  virtual BoundingBox update(const Tensor& frame, std::size_t frame_index) = 0;
};

struct TrackerConfig {
  double window_influence = 0.3;
};

/// Hann window over an N x N grid, peak 1 at the center.
inline Tensor hann_window(std::int64_t n) {
  Tensor w({n, n});
  std::vector<double> h(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    h[static_cast<std::size_t>(i)] =
        n == 1 ? 1.0 : 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) w.at(i, j) = h[static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(j)];
  return w;
}

struct Selection {
  std::int64_t row = 0, col = 0;
  double score = 0.0;
  BoundingBox crop_box;  // crop pixels
};

/// argmax over fg-probability x quality, blended with a cosine window.
inline Selection select_box(const HeadOutputs& out, const GridGeometry& g, double window_influence) {
  const auto n = g.size;
  const Tensor win = hann_window(n);
  const Tensor& c1 = out.cls1.value();
  const Tensor& c2 = out.cls2.value();
  const Tensor& loc = out.loc.value();
  Selection best;
  double best_pen = -1.0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      const double a = c1.at(0, i, j), b = c1.at(1, i, j);
      const double fg = 1.0 / (1.0 + std::exp(a - b));
      const double q = 1.0 / (1.0 + std::exp(-c2.at(0, i, j)));
      const double s = fg * q;
      const double pen = (1.0 - window_influence) * s + window_influence * win.at(i, j);
      if (pen > best_pen) {
        best_pen = pen;
        best.row = i;
        best.col = j;
        best.score = s;
      }
    }
  const auto i = best.row, j = best.col;
  best.crop_box = {g.cell_x(j) + g.stride * loc.at(0, i, j), g.cell_y(i) + g.stride * loc.at(1, i, j),
                   std::max(kMinBoxSide, g.anchor * std::exp(loc.at(2, i, j))),
                   std::max(kMinBoxSide, g.anchor * std::exp(loc.at(3, i, j)))};
  return best;
}

class TCTracker : public FrameTracker {
 public:
  TCTracker(const TCTrackModel& model, TrackerConfig cfg = {}) : model_(model), cfg_(cfg) {}

  void init(const Tensor& frame, const BoundingBox& box) override {
    ad::NoGradGuard ng;
    const auto& bc = model_.config().backbone;
    const Var z = ad::constant(crop_patch(frame, template_window(box, bc.template_size)));
    const Var x = ad::constant(crop_patch(frame, search_window(box, bc.template_size, bc.search_size)));
    state_ = model_.start(z, x);
    box_ = box;
  }

  BoundingBox update(const Tensor& frame, std::size_t) override {
    ad::NoGradGuard ng;
    const auto& bc = model_.config().backbone;
    const CropWindow win = search_window(box_, bc.template_size, bc.search_size);
    const HeadOutputs out = model_.step(state_, ad::constant(crop_patch(frame, win)));
    const Selection sel = select_box(out, model_.grid(), cfg_.window_influence);
    BoundingBox b = win.to_image(sel.crop_box);
    const double fw = static_cast<double>(frame.dim(2)), fh = static_cast<double>(frame.dim(1));
    b.cx = std::clamp(b.cx, 0.0, fw);
    b.cy = std::clamp(b.cy, 0.0, fh);
    b.w = std::clamp(b.w, 1.0, fw);
    b.h = std::clamp(b.h, 1.0, fh);
    box_ = b;
    return b;
  }

  const SequenceState& state() const { return state_; }

 private:
  const TCTrackModel& model_;
  TrackerConfig cfg_;
  SequenceState state_;
  BoundingBox box_;
};

/// Returns the ground-truth box of whichever frame it is asked about: a perfect
/// latency-free tracker, used to isolate the effect of latency.
class GroundTruthTracker : public FrameTracker {
 public:
  explicit GroundTruthTracker(std::vector<BoundingBox> gt) : gt_(std::move(gt)) {}
  void init(const Tensor&, const BoundingBox&) override {}
  BoundingBox update(const Tensor&, std::size_t i) override { return gt_.at(i); }

 private:
  std::vector<BoundingBox> gt_;
};

struct OfflineResult {
  std::vector<BoundingBox> predictions;
  std::vector<double> latency_ms;  // measured wall-clock per frame (frame 1 = initialization)
};

/// Every frame is processed; frame 1's prediction is the initialization box.
inline OfflineResult track_offline(FrameTracker& tracker, const Sequence& seq) {
  seq.validate();
  OfflineResult r;
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Tensor frame = seq.frame(i);
    const auto t0 = clock::now();
    if (i == 0) {
      tracker.init(frame, seq.groundtruth[0]);
      r.predictions.push_back(seq.groundtruth[0]);
    } else {
      r.predictions.push_back(tracker.update(frame, i));
    }
    r.latency_ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
  }
  return r;
}

}  // namespace tctrack
