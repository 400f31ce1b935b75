#pragma once

// Scaled dot-product and multi-head attention over token sequences.
//
// A token sequence is a rank-2 Var of shape (L, C): L tokens with C channels.
// Spatial maps enter through ad::tokens_from_map (H*W tokens, channels last).

#include <string>
#include <vector>

#include "tctrack/autograd.hpp"
#include "tctrack/nn.hpp"

namespace tctrack {

using ad::Var;

namespace detail {
inline void check_tokens(const Var& t, const char* role) {
  if (t.value().rank() != 2 || t.dim(0) < 1 || t.dim(1) < 1)
    throw DimensionError(std::string("attention ") + role + " must be a non-empty (L, C) sequence, got " +
                         shape_str(t.shape()));
  if (!t.value().all_finite()) throw NumericError(std::string("attention ") + role + " has non-finite entries");
}
}  // namespace detail

/// Softmax(Q K^T / sqrt(d)) V.
inline Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, double d) {
  detail::check_tokens(q, "query");
  detail::check_tokens(k, "key");
  detail::check_tokens(v, "value");
  if (k.dim(0) != v.dim(0))
    throw DimensionError("attention key/value lengths differ: " + std::to_string(k.dim(0)) + " vs " +
                         std::to_string(v.dim(0)));
  if (q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1))
    throw DimensionError("attention channel mismatch: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()));
  if (!(d > 0.0)) throw ConfigError("attention scale d must be positive");
  Var logits = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(d));
  return ad::matmul(ad::softmax_rows(logits), v);
}

/// Per-head projections W_q^n, W_k^n, W_v^n (C_i x C_h) and output projection W (C_i x C_i).
struct AttentionParams {
  std::vector<Var> wq, wk, wv;
  Var wo;
  double d = 0.0;  // scale; defaults to C_h

  AttentionParams() = default;

  AttentionParams(std::int64_t channels, int heads, Rng& rng) {
    if (heads < 1 || channels % heads != 0)
      throw ConfigError("head count " + std::to_string(heads) + " does not divide channels " +
                        std::to_string(channels));
    const std::int64_t ch = channels / heads;
    const double bound = std::sqrt(3.0 / static_cast<double>(channels));
    for (int n = 0; n < heads; ++n) {
      wq.push_back(ad::leaf(random_uniform({channels, ch}, rng, -bound, bound)));
      wk.push_back(ad::leaf(random_uniform({channels, ch}, rng, -bound, bound)));
      wv.push_back(ad::leaf(random_uniform({channels, ch}, rng, -bound, bound)));
    }
    wo = ad::leaf(random_uniform({channels, channels}, rng, -bound, bound));
    d = static_cast<double>(ch);
  }

  int heads() const { return static_cast<int>(wq.size()); }
  std::int64_t channels() const { return wo.dim(0); }
  std::int64_t head_channels() const { return wq.front().dim(1); }

  void validate() const {
    if (wq.empty() || wq.size() != wk.size() || wq.size() != wv.size())
      throw ConfigError("attention params need the same non-zero number of q/k/v projections");
    const auto ci = wo.dim(0);
    const auto chh = wq.front().dim(1);
    if (static_cast<std::int64_t>(wq.size()) * chh != ci)
      throw ConfigError("heads x head channels (" + std::to_string(wq.size()) + " x " + std::to_string(chh) +
                        ") must equal C_i = " + std::to_string(ci));
    if (!(d > 0.0)) throw ConfigError("attention scale d must be positive");
  }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    for (std::size_t n = 0; n < wq.size(); ++n) {
      const auto h = std::to_string(n);
      out.emplace_back(nn::join(prefix, "wq" + h), wq[n]);
      out.emplace_back(nn::join(prefix, "wk" + h), wk[n]);
      out.emplace_back(nn::join(prefix, "wv" + h), wv[n]);
    }
    out.emplace_back(nn::join(prefix, "wo"), wo);
  }
};

/// Cat(H^1, ..., H^N) W with H^n = Attention(Q W_q^n, K W_k^n, V W_v^n).
inline Var multi_head(const Var& q, const Var& k, const Var& v, const AttentionParams& p) {
  p.validate();
  const auto ci = p.channels();
  for (const Var* t : {&q, &k, &v})
    if (t->value().rank() != 2 || t->dim(1) != ci)
      throw DimensionError("multi_head input " + shape_str(t->shape()) + " does not have C_i = " +
                           std::to_string(ci) + " channels");
  std::vector<Var> heads;
  heads.reserve(p.wq.size());
  for (std::size_t n = 0; n < p.wq.size(); ++n)
    heads.push_back(
        scaled_dot_attention(ad::matmul(q, p.wq[n]), ad::matmul(k, p.wk[n]), ad::matmul(v, p.wv[n]), p.d));
  Var cat = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  return ad::matmul(cat, p.wo);
}

}  // namespace tctrack
