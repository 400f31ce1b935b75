#pragma once

// Small parameterized layers shared by every stage of the tracker.

#include <string>
#include <utility>
#include <vector>

#include "tctrack/autograd.hpp"

namespace tctrack::nn {

using ad::Var;

/// Ordered (name, parameter) pairs; names are stable and used as checkpoint keys.
using ParamList = std::vector<std::pair<std::string, Var>>;

enum class BiasInit { Zero, Uniform };

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// Convolution with square kernels. Weight init is LeCun-uniform (variance 1/fan_in).
struct Conv2d {
  Var weight;  // (out, in, k, k)
  Var bias;    // (out)
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, int k, Rng& rng, int stride_ = 1, int pad_ = 0,
         BiasInit bias_init = BiasInit::Uniform)
      : stride(stride_), pad(pad_) {
    if (k < 1) throw ConfigError("kernel size must be >= 1");
    const double fan_in = static_cast<double>(in * k * k);
    const double bound = std::sqrt(3.0 / fan_in);
    weight = ad::leaf(random_uniform({out, in, k, k}, rng, -bound, bound));
    if (bias_init == BiasInit::Uniform) {
      const double bb = 1.0 / std::sqrt(fan_in);
      bias = ad::leaf(random_uniform({out}, rng, -bb, bb));
    } else {
      bias = ad::leaf(Tensor::zeros({out}));
    }
  }

  std::int64_t in_channels() const { return weight.dim(1); }
  std::int64_t out_channels() const { return weight.dim(0); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }

  Var operator()(const Var& x) const { return ad::conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(join(prefix, "weight"), weight);
    out.emplace_back(join(prefix, "bias"), bias);
  }
};

/// Affine map over the channel axis of a token sequence: (L, in) -> (L, out).
/// Also serves as a 1x1 convolution on tokenized maps.
struct Linear {
  Var weight;  // (in, out)
  Var bias;    // (out)

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, BiasInit bias_init = BiasInit::Zero) {
    const double bound = std::sqrt(3.0 / static_cast<double>(in));
    weight = ad::leaf(random_uniform({in, out}, rng, -bound, bound));
    bias = ad::leaf(bias_init == BiasInit::Zero ? Tensor::zeros({out})
                                                : random_uniform({out}, rng, -1.0 / std::sqrt(double(in)),
                                                                 1.0 / std::sqrt(double(in))));
  }

  static Linear zeros(std::int64_t in, std::int64_t out) {
    Linear l;
    l.weight = ad::leaf(Tensor::zeros({in, out}));
    l.bias = ad::leaf(Tensor::zeros({out}));
    return l;
  }

  std::int64_t in_features() const { return weight.dim(0); }
  std::int64_t out_features() const { return weight.dim(1); }

  Var operator()(const Var& x) const { return ad::add_rowvec(ad::matmul(x, weight), bias); }

  /// Applies to a rank-1 vector, returning a rank-1 vector.
  Var apply_vec(const Var& v) const {
    return ad::reshape((*this)(ad::reshape(v, {1, static_cast<std::int64_t>(v.size())})), {out_features()});
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(join(prefix, "weight"), weight);
    out.emplace_back(join(prefix, "bias"), bias);
  }
};

struct LayerNorm {
  Var gamma;
  Var beta;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t c)
      : gamma(ad::leaf(Tensor::ones({c}))), beta(ad::leaf(Tensor::zeros({c}))) {}

  Var operator()(const Var& x) const { return ad::layer_norm_rows(x, gamma, beta, eps); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(join(prefix, "gamma"), gamma);
    out.emplace_back(join(prefix, "beta"), beta);
  }
};

/// Two-layer feed-forward block: Linear -> ReLU -> Linear.
struct FeedForward {
  Linear fc1;
  Linear fc2;

  FeedForward() = default;
  FeedForward(std::int64_t in, std::int64_t hidden, std::int64_t out, Rng& rng, bool zero_last = false)
      : fc1(in, hidden, rng), fc2(zero_last ? Linear::zeros(hidden, out) : Linear(hidden, out, rng)) {}

  Var operator()(const Var& x) const { return fc2(ad::relu(fc1(x))); }
  Var apply_vec(const Var& v) const { return fc2.apply_vec(ad::relu(fc1.apply_vec(v))); }

  void collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(join(prefix, "fc1"), out);
    fc2.collect(join(prefix, "fc2"), out);
  }
};

/// 1x1 convolution on a (C,H,W) map expressed through its token form.
inline Var pointwise(const Linear& proj, const Var& map) {
  return ad::map_from_tokens(proj(ad::tokens_from_map(map)), map.dim(1), map.dim(2));
}

}  // namespace tctrack::nn
