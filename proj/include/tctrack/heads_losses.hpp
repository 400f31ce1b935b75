#pragma once

// Classification / regression heads over the refined similarity map, label
// construction, and the four training losses.
//
// Grid convention: cell (i, j) of an N x N map sits at crop coordinate
//   x_j = crop/2 + (j - (N-1)/2) * stride   (likewise y_i)
// and F_loc channels (tx, ty, tw, th) decode to the box
//   cx = x_j + stride * tx,  cy = y_i + stride * ty,
//   w = anchor * exp(tw),    h = anchor * exp(th)
// in crop pixels.

#include <string>
#include <utility>

#include "tctrack/autograd.hpp"
#include "tctrack/box.hpp"
#include "tctrack/nn.hpp"

namespace tctrack {

using ad::Var;

/// Raised for malformed ground-truth targets.
class InvalidTarget : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GridGeometry {
  std::int64_t size = 21;     // N_m
  double stride = 8.0;        // backbone total stride
  double crop_size = 287.0;   // search patch side
  double anchor = 63.5;       // reference box side for w/h decoding

  double cell_x(std::int64_t j) const {
    return crop_size / 2.0 + (static_cast<double>(j) - static_cast<double>(size - 1) / 2.0) * stride;
  }
  double cell_y(std::int64_t i) const { return cell_x(i); }

  Tensor x_map() const {
    Tensor t({size, size});
    for (std::int64_t i = 0; i < size; ++i)
      for (std::int64_t j = 0; j < size; ++j) t.at(i, j) = cell_x(j);
    return t;
  }
  Tensor y_map() const {
    Tensor t({size, size});
    for (std::int64_t i = 0; i < size; ++i)
      for (std::int64_t j = 0; j < size; ++j) t.at(i, j) = cell_y(i);
    return t;
  }
};

struct HeadOutputs {
  Var cls1;  // (2, N, N): background / foreground logits
  Var cls2;  // (1, N, N): quality logits
  Var loc;   // (4, N, N): tx, ty, tw, th
};

/// Three branches, each a 3x3 conv + ReLU followed by a 1x1 conv.
class Heads {
 public:
  Heads() = default;
  Heads(std::int64_t channels, Rng& rng) {
    for (int b = 0; b < 3; ++b) {
      const std::int64_t out = b == 0 ? 2 : (b == 1 ? 1 : 4);
      tower_[b] = nn::Conv2d(channels, channels, 3, rng, 1, 1);
      out_[b] = nn::Conv2d(channels, out, 1, rng);
    }
  }

  HeadOutputs forward(const Var& refined) const {
    if (refined.value().rank() != 3 || refined.dim(0) != tower_[0].in_channels())
      throw DimensionError("heads expect (" + std::to_string(tower_[0].in_channels()) + ",N,N), got " +
                           shape_str(refined.shape()));
    auto branch = [&](int b) { return out_[b](ad::relu(tower_[b](refined))); };
    return {branch(0), branch(1), branch(2)};
  }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    static const char* names[] = {"cls1", "cls2", "loc"};
    for (int b = 0; b < 3; ++b) {
      tower_[b].collect(nn::join(prefix, std::string(names[b]) + ".tower"), out);
      out_[b].collect(nn::join(prefix, std::string(names[b]) + ".out"), out);
    }
  }

 private:
  nn::Conv2d tower_[3];
  nn::Conv2d out_[3];
};

inline HeadOutputs heads_forward(const Heads& heads, const Var& refined) { return heads.forward(refined); }

/// Ground truth for one frame, all maps (N, N).
struct GroundTruthTargets {
  BoundingBox box;  // in crop pixels
  Tensor cls1;      // 1 where the cell center lies inside the box
  Tensor cls2;      // centerness quality in [0, 1]
  Tensor mask;      // cells supervised by the box losses

  void validate() const {
    if (!(box.w > 0.0) || !(box.h > 0.0)) throw InvalidTarget("target box needs w > 0 and h > 0");
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] != 0.0 && mask[i] != 1.0) throw InvalidTarget("mask entries must be 0 or 1");
      if (cls1[i] != 0.0 && cls1[i] != 1.0) throw InvalidTarget("location labels must be 0 or 1");
      if (!(cls2[i] >= 0.0 && cls2[i] <= 1.0)) throw InvalidTarget("quality labels must lie in [0, 1]");
    }
  }
};

inline GroundTruthTargets make_targets(const BoundingBox& box, const GridGeometry& g) {
  if (!(box.w > 0.0) || !(box.h > 0.0)) throw InvalidTarget("target box needs w > 0 and h > 0");
  GroundTruthTargets t{box, Tensor({g.size, g.size}), Tensor({g.size, g.size}), Tensor({g.size, g.size})};
  for (std::int64_t i = 0; i < g.size; ++i)
    for (std::int64_t j = 0; j < g.size; ++j) {
      const double x = g.cell_x(j), y = g.cell_y(i);
      const double l = x - box.x1(), r = box.x2() - x, tp = y - box.y1(), b = box.y2() - y;
      if (l > 0 && r > 0 && tp > 0 && b > 0) {
        t.cls1.at(i, j) = 1.0;
        t.mask.at(i, j) = 1.0;
        t.cls2.at(i, j) = std::sqrt(std::min(l, r) / std::max(l, r) * std::min(tp, b) / std::max(tp, b));
      }
    }
  return t;
}

/// Per-cell boxes decoded from F_loc, each (N, N), crop pixels.
struct DecodedBoxes {
  Var cx, cy, w, h;
};

inline constexpr double kMinBoxSide = 1e-4;

inline DecodedBoxes decode_boxes(const Var& loc, const GridGeometry& g) {
  if (loc.value().rank() != 3 || loc.dim(0) != 4 || loc.dim(1) != g.size || loc.dim(2) != g.size)
    throw DimensionError("loc field must be (4," + std::to_string(g.size) + "," + std::to_string(g.size) +
                         "), got " + shape_str(loc.shape()));
  auto channel = [&](int c) { return ad::reshape(ad::slice0(loc, c, c + 1), {g.size, g.size}); };
  DecodedBoxes d;
  d.cx = ad::add(ad::constant(g.x_map()), ad::scale(channel(0), g.stride));
  d.cy = ad::add(ad::constant(g.y_map()), ad::scale(channel(1), g.stride));
  d.w = ad::clamp_min(ad::scale(ad::exp(channel(2)), g.anchor), kMinBoxSide);
  d.h = ad::clamp_min(ad::scale(ad::exp(channel(3)), g.anchor), kMinBoxSide);
  return d;
}

namespace detail {
inline Var masked_mean(const Var& per_cell, const Tensor& mask) {
  double count = 0.0;
  for (double m : mask.data()) count += m;
  if (count == 0.0) return ad::constant(Tensor({1}, 0.0));
  return ad::scale(ad::dot_const(per_cell, mask), 1.0 / count);
}

inline Var const_like(const Var& v, double value) { return ad::constant(Tensor::full(v.shape(), value)); }
}  // namespace detail

/// Masked mean of D = sqrt((x^ - x)^2 / w + (y^ - y)^2 / h).
inline Var center_distance_loss(const DecodedBoxes& pred, const GroundTruthTargets& t) {
  t.validate();
  const Var dx = ad::add_scalar(pred.cx, -t.box.cx);
  const Var dy = ad::add_scalar(pred.cy, -t.box.cy);
  const Var d = ad::safe_sqrt(ad::add(ad::scale(ad::square(dx), 1.0 / t.box.w), ad::scale(ad::square(dy), 1.0 / t.box.h)));
  return detail::masked_mean(d, t.mask);
}

/// Per-cell IoU of decoded boxes against the target box.
inline Var iou_map(const DecodedBoxes& pred, const BoundingBox& gt) {
  const Var hw = ad::scale(pred.w, 0.5), hh = ad::scale(pred.h, 0.5);
  const Var x1 = ad::sub(pred.cx, hw), x2 = ad::add(pred.cx, hw);
  const Var y1 = ad::sub(pred.cy, hh), y2 = ad::add(pred.cy, hh);
  using detail::const_like;
  const Var iw = ad::relu(ad::sub(ad::minimum(x2, const_like(x2, gt.x2())), ad::maximum(x1, const_like(x1, gt.x1()))));
  const Var ih = ad::relu(ad::sub(ad::minimum(y2, const_like(y2, gt.y2())), ad::maximum(y1, const_like(y1, gt.y1()))));
  const Var inter = ad::mul(iw, ih);
  const Var area_p = ad::mul(ad::sub(x2, x1), ad::sub(y2, y1));
  const Var uni = ad::sub(ad::add_scalar(area_p, gt.area()), inter);
  return ad::div(inter, uni);
}

/// Masked mean of (1 - IoU).
inline Var iou_loss(const DecodedBoxes& pred, const GroundTruthTargets& t) {
  t.validate();
  return detail::masked_mean(ad::add_scalar(ad::neg(iou_map(pred, t.box)), 1.0), t.mask);
}

inline Var loss_loc1(const Var& loc, const GroundTruthTargets& t, const GridGeometry& g) {
  return center_distance_loss(decode_boxes(loc, g), t);
}

inline Var loss_loc2(const Var& loc, const GroundTruthTargets& t, const GridGeometry& g) {
  return iou_loss(decode_boxes(loc, g), t);
}

/// (CE over cls1 logits, BCE over cls2 logits), both averaged over all cells.
inline std::pair<Var, Var> loss_cls(const Var& cls1, const Var& cls2, const GroundTruthTargets& t) {
  t.validate();
  const std::int64_t n = t.cls1.dim(0);
  if (cls1.shape() != Shape{2, n, n} || cls2.shape() != Shape{1, n, n})
    throw DimensionError("classification logits " + shape_str(cls1.shape()) + ", " + shape_str(cls2.shape()) +
                         " do not match labels " + shape_str(t.cls1.shape()));
  if (!cls1.value().all_finite() || !cls2.value().all_finite()) throw NumericError("non-finite logits");
  const double cells = static_cast<double>(n * n);
  Tensor onehot({2, n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) onehot.at(t.cls1.at(i, j) > 0.5 ? 1 : 0, i, j) = 1.0;
  const Var ce = ad::scale(ad::dot_const(ad::log_softmax_dim0(cls1), onehot), -1.0 / cells);
  const Tensor g2 = t.cls2.reshaped({1, n, n});
  const Var bce = ad::scale(ad::sub(ad::sum(ad::softplus(cls2)), ad::dot_const(cls2, g2)), 1.0 / cells);
  return {ce, bce};
}

struct LossParts {
  Var cls1, cls2, loc1, loc2;
};

/// L = L_cls1 + L_cls2 + L_loc1 + L_loc2.
inline Var total_loss(const LossParts& p) { return ad::add_all({p.cls1, p.cls2, p.loc1, p.loc2}); }

inline LossParts compute_losses(const HeadOutputs& out, const GroundTruthTargets& t, const GridGeometry& g) {
  auto [ce, bce] = loss_cls(out.cls1, out.cls2, t);
  const DecodedBoxes boxes = decode_boxes(out.loc, g);
  return {ce, bce, center_distance_loss(boxes, t), iou_loss(boxes, t)};
}

}  // namespace tctrack
