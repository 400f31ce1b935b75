#pragma once

// Temporally calibrated convolution.
//
// A base convolution (W_b, b_b) is rescaled per frame by calibration factors
// alpha_w, alpha_b (one scalar per output channel):
//
//     W_t = W_b * alpha_w,  b_t = b_b * alpha_b,  out = W_t * X_t + b_t
//
// The factors come from a fixed-size temporal knowledge map X* (C_r, S, S)
// that is refreshed every frame by cross-attention between the pooled current
// input (query) and the previous knowledge (key/value). Two zero-initialized
// heads map GAP(X*) to factor offsets, so a fresh layer is exactly its base
// convolution.
//
// The queue-based variant keeps the global descriptors of the last L inputs and
// mixes them with a temporal 1-D convolution instead of attention.

#include <deque>
#include <string>

#include "tctrack/attention.hpp"
#include "tctrack/nn.hpp"

namespace tctrack {

struct TadaConfig {
  std::int64_t pooled_size = 4;  // S
  int channel_reduction = 4;     // C_r = C_in / channel_reduction
  int head_reduction = 4;        // hidden width of F_w / F_b = max(1, C_out / head_reduction)
  int queue_length = 3;          // L for the queue-based variant
};

using BaseConvParams = nn::Conv2d;

struct CalibrationFactors {
  Var alpha_w;  // (C_out)
  Var alpha_b;  // (C_out)

  static CalibrationFactors identity(std::int64_t c_out) {
    return {ad::constant(Tensor::ones({c_out})), ad::constant(Tensor::ones({c_out}))};
  }
};

/// Accumulated feature-level temporal knowledge for one layer of one sequence.
struct TemporalCalibState {
  Var x_star;  // (C_r, S, S)

  bool initialized() const { return x_star.defined(); }
};

/// Learnable networks that produce and consume TemporalCalibState.
struct TemporalCalibNets {
  std::int64_t pooled_size = 4;
  nn::Linear f_init;  // C_in -> C_r on MaxPool(X_1)
  nn::Linear f_q;     // C_in -> C_r
  nn::Linear f_k;     // C_r -> C_r
  nn::Linear f_v;     // C_r -> C_r
  nn::FeedForward f_w;  // C_r -> hidden -> C_out, last layer zero
  nn::FeedForward f_b;

  TemporalCalibNets() = default;
  TemporalCalibNets(std::int64_t c_in, std::int64_t c_out, const TadaConfig& cfg, Rng& rng)
      : pooled_size(cfg.pooled_size) {
    if (cfg.channel_reduction < 1 || cfg.head_reduction < 1 || cfg.pooled_size < 1)
      throw ConfigError("temporal calibration reductions and pooled size must be >= 1");
    const std::int64_t c_r = std::max<std::int64_t>(1, c_in / cfg.channel_reduction);
    const std::int64_t hidden = std::max<std::int64_t>(1, c_out / cfg.head_reduction);
    f_init = nn::Linear(c_in, c_r, rng);
    f_q = nn::Linear(c_in, c_r, rng);
    f_k = nn::Linear(c_r, c_r, rng);
    f_v = nn::Linear(c_r, c_r, rng);
    f_w = nn::FeedForward(c_r, hidden, c_out, rng, /*zero_last=*/true);
    f_b = nn::FeedForward(c_r, hidden, c_out, rng, /*zero_last=*/true);
  }

  std::int64_t reduced_channels() const { return f_init.out_features(); }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    f_init.collect(nn::join(prefix, "f_init"), out);
    f_q.collect(nn::join(prefix, "f_q"), out);
    f_k.collect(nn::join(prefix, "f_k"), out);
    f_v.collect(nn::join(prefix, "f_v"), out);
    f_w.collect(nn::join(prefix, "f_w"), out);
    f_b.collect(nn::join(prefix, "f_b"), out);
  }
};

namespace detail {
inline Var pooled_input(const Var& x, std::int64_t s) {
  if (x.value().rank() != 3) throw DimensionError("temporal calibration input must be (C,H,W)");
  if (x.dim(1) < s || x.dim(2) < s)
    throw ConfigError("input " + shape_str(x.shape()) + " is smaller than the pooled size " + std::to_string(s));
  return ad::adaptive_max_pool2d(x, s);
}
}  // namespace detail

/// X*_0 = F_init(MaxPool(X_1)).
inline TemporalCalibState init_state(const Var& x1, const TemporalCalibNets& nets) {
  return {nn::pointwise(nets.f_init, detail::pooled_input(x1, nets.pooled_size))};
}

/// X*_t = Attention(F_q(MaxPool(X_t)), F_k(X*_{t-1}), F_v(X*_{t-1})).
inline TemporalCalibState update_state(const TemporalCalibState& state, const Var& x_t,
                                       const TemporalCalibNets& nets) {
  if (!state.initialized()) throw std::logic_error("update_state on an uninitialized temporal state");
  const Var pooled = detail::pooled_input(x_t, nets.pooled_size);
  const Var q = nets.f_q(ad::tokens_from_map(pooled));
  const Var mem = ad::tokens_from_map(state.x_star);
  const Var k = nets.f_k(mem);
  const Var v = nets.f_v(mem);
  const Var out = scaled_dot_attention(q, k, v, static_cast<double>(nets.reduced_channels()));
  TemporalCalibState next{ad::map_from_tokens(out, state.x_star.dim(1), state.x_star.dim(2))};
  if (next.x_star.shape() != state.x_star.shape())
    throw std::logic_error("temporal state shape drifted from " + shape_str(state.x_star.shape()) + " to " +
                           shape_str(next.x_star.shape()));
  return next;
}

/// alpha_w = F_w(GAP(X*)) + 1, alpha_b = F_b(GAP(X*)) + 1.
inline CalibrationFactors calibration_factors(const TemporalCalibState& state, const TemporalCalibNets& nets) {
  if (!state.initialized()) throw std::logic_error("calibration_factors on an uninitialized temporal state");
  const Var desc = ad::global_avg_pool(state.x_star);
  return {ad::add_scalar(nets.f_w.apply_vec(desc), 1.0), ad::add_scalar(nets.f_b.apply_vec(desc), 1.0)};
}

/// Convolution with calibrated weight and bias.
inline Var att_tada_forward(const Var& x_t, const BaseConvParams& base, const CalibrationFactors& f) {
  const auto c_out = base.out_channels();
  if (f.alpha_w.size() != static_cast<std::size_t>(c_out) || f.alpha_b.size() != static_cast<std::size_t>(c_out))
    throw DimensionError("calibration factors have " + std::to_string(f.alpha_w.size()) + " entries, layer has " +
                         std::to_string(c_out) + " output channels");
  return ad::conv2d(x_t, ad::scale_dim0(base.weight, f.alpha_w), ad::mul(base.bias, f.alpha_b), base.stride,
                    base.pad);
}

// ----------------------------------------------------------------- queue variant

/// Global descriptors (GAP of the layer input) of the most recent frames, newest last.
struct DescriptorQueue {
  std::size_t capacity = 3;
  std::deque<Var> items;

  void push(Var d) {
    items.push_back(std::move(d));
    while (items.size() > capacity) items.pop_front();
  }
};

/// hidden = ReLU(sum_j D_{t-j} T_j + c) over the queue (temporal 1-D conv of width L),
/// alpha = Linear(hidden) + 1 with zero-initialized output layers.
struct OnlineTadaNets {
  std::vector<Var> taps;  // L matrices (C_in, hidden); taps[0] multiplies the newest descriptor
  Var tap_bias;           // (hidden)
  nn::Linear out_w;
  nn::Linear out_b;

  OnlineTadaNets() = default;
  OnlineTadaNets(std::int64_t c_in, std::int64_t c_out, const TadaConfig& cfg, Rng& rng) {
    if (cfg.queue_length < 1) throw ConfigError("queue length L must be >= 1");
    const std::int64_t hidden = std::max<std::int64_t>(1, c_out / cfg.head_reduction);
    const double bound = std::sqrt(3.0 / static_cast<double>(c_in * cfg.queue_length));
    for (int j = 0; j < cfg.queue_length; ++j)
      taps.push_back(ad::leaf(random_uniform({c_in, hidden}, rng, -bound, bound)));
    tap_bias = ad::leaf(Tensor::zeros({hidden}));
    out_w = nn::Linear::zeros(hidden, c_out);
    out_b = nn::Linear::zeros(hidden, c_out);
  }

  std::size_t queue_length() const { return taps.size(); }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    for (std::size_t j = 0; j < taps.size(); ++j) out.emplace_back(nn::join(prefix, "tap" + std::to_string(j)), taps[j]);
    out.emplace_back(nn::join(prefix, "tap_bias"), tap_bias);
    out_w.collect(nn::join(prefix, "out_w"), out);
    out_b.collect(nn::join(prefix, "out_b"), out);
  }
};

/// Factors from the queued descriptors; an empty queue yields identity factors.
inline CalibrationFactors online_calibration(const DescriptorQueue& queue, const OnlineTadaNets& nets) {
  const auto c_out = nets.out_w.out_features();
  if (queue.items.empty()) return CalibrationFactors::identity(c_out);
  if (queue.items.size() > nets.queue_length())
    throw DimensionError("descriptor queue longer than the configured L");
  const auto hidden = nets.tap_bias.size();
  Var acc = nets.tap_bias;
  for (std::size_t j = 0; j < queue.items.size(); ++j) {
    const Var& d = queue.items[queue.items.size() - 1 - j];
    const Var row = ad::reshape(d, {1, static_cast<std::int64_t>(d.size())});
    acc = ad::add(acc, ad::reshape(ad::matmul(row, nets.taps[j]), {static_cast<std::int64_t>(hidden)}));
  }
  const Var h = ad::relu(acc);
  return {ad::add_scalar(nets.out_w.apply_vec(h), 1.0), ad::add_scalar(nets.out_b.apply_vec(h), 1.0)};
}

/// Pushes GAP(X_t) into the queue, then convolves X_t with queue-calibrated parameters.
inline Var online_tada_forward(DescriptorQueue& queue, const Var& x_t, const BaseConvParams& base,
                               const OnlineTadaNets& nets) {
  queue.capacity = nets.queue_length();
  queue.push(ad::global_avg_pool(x_t));
  return att_tada_forward(x_t, base, online_calibration(queue, nets));
}

}  // namespace tctrack
