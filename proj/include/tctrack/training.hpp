#pragma once

// Multi-frame training: curriculum clip lengths, log-space learning rate,
// backbone freeze window, and momentum SGD over unrolled clips.

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tctrack/image.hpp"
#include "tctrack/model.hpp"

namespace tctrack {

/// Clip length per epoch. Stage s covers epochs (boundaries[s-1], boundaries[s]].
struct CurriculumSchedule {
  bool enabled = true;
  std::vector<int> boundaries{33, 50};
  std::vector<int> lengths{2, 3, 4};
  int fixed_length = 2;  // used when disabled
  int total_epochs = 100;

  void validate() const {
    if (!enabled) {
      if (fixed_length < 2) throw ConfigError("fixed clip length must be >= 2");
      return;
    }
    if (lengths.size() != boundaries.size() + 1)
      throw ConfigError("curriculum needs exactly one more length than boundaries");
    for (std::size_t i = 1; i < boundaries.size(); ++i)
      if (boundaries[i] <= boundaries[i - 1]) throw ConfigError("curriculum boundaries must increase");
    for (std::size_t i = 1; i < lengths.size(); ++i)
      if (lengths[i] < lengths[i - 1]) throw ConfigError("curriculum lengths must be non-decreasing");
    if (lengths.front() < 2) throw ConfigError("curriculum clip lengths must be >= 2");
  }
};

inline int video_length(int epoch, const CurriculumSchedule& s) {
  if (epoch < 1 || epoch > s.total_epochs)
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(s.total_epochs) + "]");
  if (!s.enabled) return s.fixed_length;
  std::size_t stage = 0;
  while (stage < s.boundaries.size() && epoch > s.boundaries[stage]) ++stage;
  return s.lengths[stage];
}

struct LrSchedule {
  double start = 0.005;
  double end = 0.0005;
  int epochs = 100;
  double momentum = 0.9;
  int batch_size = 124;
};

/// lr(e) = start * (end / start)^((e - 1) / (E - 1)).
inline double learning_rate(int epoch, const LrSchedule& s) {
  if (epoch < 1 || epoch > s.epochs)
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(s.epochs) + "]");
  if (s.epochs == 1) return s.start;
  const double frac = static_cast<double>(epoch - 1) / static_cast<double>(s.epochs - 1);
  return s.start * std::pow(s.end / s.start, frac);
}

struct TrainConfig {
  CurriculumSchedule curriculum;
  LrSchedule lr;
  int freeze_epochs = 10;
  std::uint64_t seed = 0;
  double grad_clip_norm = 0.0;  // 0 disables clipping
};

/// A short video with one box per frame (center format, image pixels).
struct Clip {
  std::vector<Tensor> frames;
  std::vector<BoundingBox> boxes;
};

/// v <- mu v + g; p <- p - lr v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum) : momentum_(momentum) {}

  void step(const nn::ParamList& params, double lr) {
    for (const auto& [name, p] : params) {
      if (!p.requires_grad()) continue;
      const Tensor g = p.grad();
      auto& v = velocity_[p.node()];
      if (v.size() != g.size()) v = Tensor::zeros(g.shape());
      Var param = p;
      auto& w = param.mutable_value();
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        w[i] -= lr * v[i];
      }
    }
  }

 private:
  double momentum_;
  std::unordered_map<const ad::Node*, Tensor> velocity_;
};

struct StepReport {
  double loss = 0.0;
  double cls1 = 0.0, cls2 = 0.0, loc1 = 0.0, loc2 = 0.0;
  double lr = 0.0;
  int clip_length = 0;
  bool backbone_frozen = false;
  std::size_t graph_bytes = 0;  // value + gradient storage of the unrolled graph
};

/// Bytes held by values and gradients of every node reachable from root.
inline std::size_t graph_bytes(const Var& root) {
  std::size_t bytes = 0;
  std::unordered_set<const ad::Node*> seen;
  std::vector<const ad::Node*> stack{root.node()};
  while (!stack.empty()) {
    const ad::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    bytes += (n->value.size() + n->grad.size()) * sizeof(double);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return bytes;
}

inline bool is_backbone_param(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

/// Mean Eq.-15 loss over frames 2..T of one clip, with the graph recorded.
inline LossParts clip_loss(const TCTrackModel& model, const Clip& clip) {
  if (clip.frames.size() < 2 || clip.frames.size() != clip.boxes.size())
    throw std::invalid_argument("a training clip needs at least 2 frames and one box per frame");
  const auto& bc = model.config().backbone;
  const GridGeometry g = model.grid();
  const Var z = ad::constant(crop_patch(clip.frames[0], template_window(clip.boxes[0], bc.template_size)));
  const Var x1 = ad::constant(
      crop_patch(clip.frames[0], search_window(clip.boxes[0], bc.template_size, bc.search_size)));
  SequenceState st = model.start(z, x1);
  std::vector<Var> c1, c2, l1, l2;
  for (std::size_t t = 1; t < clip.frames.size(); ++t) {
    const CropWindow win = search_window(clip.boxes[t - 1], bc.template_size, bc.search_size);
    const Var x = ad::constant(crop_patch(clip.frames[t], win));
    const HeadOutputs out = model.step(st, x);
    const LossParts p = compute_losses(out, make_targets(win.to_crop(clip.boxes[t]), g), g);
    c1.push_back(p.cls1);
    c2.push_back(p.cls2);
    l1.push_back(p.loc1);
    l2.push_back(p.loc2);
  }
  const double inv = 1.0 / static_cast<double>(c1.size());
  return {ad::scale(ad::add_all(c1), inv), ad::scale(ad::add_all(c2), inv), ad::scale(ad::add_all(l1), inv),
          ad::scale(ad::add_all(l2), inv)};
}

class Trainer {
 public:
  Trainer(TCTrackModel& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), opt_(cfg_.lr.momentum), params_(model.named_parameters()) {
    cfg_.curriculum.validate();
  }

  const TrainConfig& config() const { return cfg_; }

  /// One optimizer step over a batch of clips whose length must equal video_length(epoch).
  StepReport train_step(const std::vector<Clip>& batch, int epoch) {
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    const int length = video_length(epoch, cfg_.curriculum);
    for (const auto& c : batch) {
      if (c.frames.size() < 2) throw std::invalid_argument("training clips need at least 2 frames");
      if (static_cast<int>(c.frames.size()) != length)
        throw std::invalid_argument("clip length " + std::to_string(c.frames.size()) + " != scheduled length " +
                                    std::to_string(length) + " at epoch " + std::to_string(epoch));
    }
    std::vector<Var> c1, c2, l1, l2;
    for (const auto& c : batch) {
      const LossParts p = clip_loss(model_, c);
      c1.push_back(p.cls1);
      c2.push_back(p.cls2);
      l1.push_back(p.loc1);
      l2.push_back(p.loc2);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    const LossParts parts{ad::scale(ad::add_all(c1), inv), ad::scale(ad::add_all(c2), inv),
                          ad::scale(ad::add_all(l1), inv), ad::scale(ad::add_all(l2), inv)};
    const Var loss = total_loss(parts);

    StepReport rep;
    rep.loss = loss.item();
    rep.cls1 = parts.cls1.item();
    rep.cls2 = parts.cls2.item();
    rep.loc1 = parts.loc1.item();
    rep.loc2 = parts.loc2.item();
    rep.lr = learning_rate(epoch, cfg_.lr);
    rep.clip_length = length;
    rep.backbone_frozen = epoch <= cfg_.freeze_epochs;
    rep.graph_bytes = graph_bytes(loss);

    ad::backward(loss);
    if (rep.backbone_frozen)
      for (auto& [name, p] : params_)
        if (is_backbone_param(name)) Var(p).zero_grad();
    if (cfg_.grad_clip_norm > 0.0) clip_gradients();
    opt_.step(params_, rep.lr);
    for (auto& [name, p] : params_) Var(p).zero_grad();
    return rep;
  }

 private:
  void clip_gradients() {
    double sq = 0.0;
    for (const auto& [name, p] : params_)
      for (double g : p.node()->grad.data()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= cfg_.grad_clip_norm) return;
    const double f = cfg_.grad_clip_norm / norm;
    for (const auto& [name, p] : params_)
      for (double& g : p.node()->grad.data()) g *= f;
  }

  TCTrackModel& model_;
  TrainConfig cfg_;
  SgdMomentum opt_;
  nn::ParamList params_;
};

/// Frames [start, start + length) of a clip.
inline Clip subclip(const Clip& c, std::size_t start, std::size_t length) {
  if (start + length > c.frames.size()) throw std::out_of_range("sub-clip exceeds clip length");
  Clip sub;
  const auto b = static_cast<std::ptrdiff_t>(start), e = static_cast<std::ptrdiff_t>(start + length);
  sub.frames.assign(c.frames.begin() + b, c.frames.begin() + e);
  sub.boxes.assign(c.boxes.begin() + b, c.boxes.begin() + e);
  return sub;
}

/// Consecutive sub-clips of the requested length from a longer clip.
inline std::vector<Clip> split_clip(const Clip& c, int length) {
  std::vector<Clip> out;
  const auto len = static_cast<std::size_t>(length);
  for (std::size_t s = 0; s + len <= c.frames.size(); s += len) out.push_back(subclip(c, s, len));
  return out;
}

}  // namespace tctrack
