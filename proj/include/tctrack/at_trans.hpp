#pragma once

// Adaptive temporal transformer over similarity maps.
//
// Encoder (prior F^m_{t-1}, current map F_t):
//   F1 = Norm(F_t + MH(F^m_{t-1}, F_t, F_t))
//   F2 = Norm(F1 + MH(F1, F1, F1))
//   a  = FFN(GAP(Fg(F1)))                      per-channel gate
//   Ff = F2 + Fc(Cat(F2, F1)) * a
//   F^m_t = Norm(Ff + MH(Ff, Ff, Ff))
// Decoder:
//   F3 = Norm(F_t + MH(F_t, F_t, F_t))
//   F4 = Norm(F3 + MH(F3, F^m_t, F^m_t))
//   F* = Norm(F4 + FFN(F4))
//
// Everything runs on token sequences (H*W, C).

#include <optional>
#include <string>

#include "tctrack/attention.hpp"
#include "tctrack/nn.hpp"

namespace tctrack {

struct TransConfig {
  std::int64_t channels = 192;
  int heads = 6;
  int ffn_ratio = 2;
  bool swap_encoder_roles = false;  // ablation: query F_t, key/value F^m_{t-1}
};

/// Fixed-size similarity-level temporal knowledge.
struct TemporalPrior {
  Var tokens;  // (H*W, C)
  std::int64_t height = 0;
  std::int64_t width = 0;

  Var as_map() const { return ad::map_from_tokens(tokens, height, width); }
};

/// Intermediates of one encoder pass, exposed for inspection and tests.
struct EncoderTrace {
  Var f1, f2, gate, filtered, prior;
};

struct DecoderTrace {
  Var f3, f4, refined;
};

class AtTrans {
 public:
  AtTrans() = default;
  /// raw_channels: channel count of R_1 used for the prior initialization.
  AtTrans(const TransConfig& cfg, std::int64_t raw_channels, Rng& rng) : cfg_(cfg) {
    const auto c = cfg.channels;
    if (cfg.heads < 1 || c % cfg.heads != 0)
      throw ConfigError("transformer channels " + std::to_string(c) + " not divisible by " +
                        std::to_string(cfg.heads) + " heads");
    if (cfg.ffn_ratio < 1) throw ConfigError("ffn_ratio must be >= 1");
    f_init_ = nn::Linear(raw_channels, c, rng);
    enc_cross_ = AttentionParams(c, cfg.heads, rng);
    enc_self_ = AttentionParams(c, cfg.heads, rng);
    enc_out_ = AttentionParams(c, cfg.heads, rng);
    norm1_ = nn::LayerNorm(c);
    norm2_ = nn::LayerNorm(c);
    norm3_ = nn::LayerNorm(c);
    gate_proj_ = nn::Linear(c, c, rng);
    gate_ffn_ = nn::FeedForward(c, c * cfg.ffn_ratio, c, rng);
    fuse_proj_ = nn::Linear(2 * c, c, rng);
    dec_self_ = AttentionParams(c, cfg.heads, rng);
    dec_cross_ = AttentionParams(c, cfg.heads, rng);
    norm4_ = nn::LayerNorm(c);
    norm5_ = nn::LayerNorm(c);
    norm6_ = nn::LayerNorm(c);
    dec_ffn_ = nn::FeedForward(c, c * cfg.ffn_ratio, c, rng);
  }

  const TransConfig& config() const { return cfg_; }
  void set_swap_encoder_roles(bool s) { cfg_.swap_encoder_roles = s; }

  /// F^m_0 = F_init(R_1) with a 1x1 convolution.
  TemporalPrior init_prior(const Var& r1) const {
    if (r1.value().rank() != 3) throw DimensionError("init_prior expects a (C,H,W) map");
    return {f_init_(ad::tokens_from_map(r1)), r1.dim(1), r1.dim(2)};
  }

  EncoderTrace encode_traced(const TemporalPrior& prior, const Var& f_t,
                             const std::optional<Tensor>& gate_override = std::nullopt) const {
    const Var x = tokens(f_t, prior);
    const Var& m = prior.tokens;
    EncoderTrace tr;
    const Var cross = cfg_.swap_encoder_roles ? multi_head(x, m, m, enc_cross_) : multi_head(m, x, x, enc_cross_);
    tr.f1 = norm1_(ad::add(x, cross));
    tr.f2 = norm2_(ad::add(tr.f1, multi_head(tr.f1, tr.f1, tr.f1, enc_self_)));
    if (gate_override) {
      if (gate_override->size() != static_cast<std::size_t>(cfg_.channels))
        throw DimensionError("gate override must have one entry per channel");
      tr.gate = ad::constant(*gate_override);
    } else {
      const Var desc = ad::global_avg_pool(ad::transpose(gate_proj_(tr.f1)));
      tr.gate = gate_ffn_.apply_vec(desc);
    }
    const Var fused = fuse_proj_(ad::concat_cols({tr.f2, tr.f1}));
    const Var gated = ad::transpose(ad::scale_dim0(ad::transpose(fused), tr.gate));
    tr.filtered = ad::add(tr.f2, gated);
    tr.prior = norm3_(ad::add(tr.filtered, multi_head(tr.filtered, tr.filtered, tr.filtered, enc_out_)));
    return tr;
  }

  TemporalPrior encode(const TemporalPrior& prior, const Var& f_t) const {
    return {encode_traced(prior, f_t).prior, prior.height, prior.width};
  }

  DecoderTrace decode_traced(const TemporalPrior& prior, const Var& f_t) const {
    const Var x = tokens(f_t, prior);
    DecoderTrace tr;
    tr.f3 = norm4_(ad::add(x, multi_head(x, x, x, dec_self_)));
    tr.f4 = norm5_(ad::add(tr.f3, multi_head(tr.f3, prior.tokens, prior.tokens, dec_cross_)));
    tr.refined = norm6_(ad::add(tr.f4, dec_ffn_(tr.f4)));
    return tr;
  }

  /// Refined map F*_t with the shape of F_t.
  Var decode(const TemporalPrior& prior, const Var& f_t) const {
    return ad::map_from_tokens(decode_traced(prior, f_t).refined, f_t.dim(1), f_t.dim(2));
  }

  /// Encode then decode; returns the updated prior and the refined map.
  std::pair<TemporalPrior, Var> step(const TemporalPrior& prior, const Var& f_t) const {
    TemporalPrior next = encode(prior, f_t);
    Var refined = decode(next, f_t);
    return {std::move(next), std::move(refined)};
  }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    f_init_.collect(nn::join(prefix, "f_init"), out);
    enc_cross_.collect(nn::join(prefix, "enc_cross"), out);
    enc_self_.collect(nn::join(prefix, "enc_self"), out);
    enc_out_.collect(nn::join(prefix, "enc_out"), out);
    norm1_.collect(nn::join(prefix, "norm1"), out);
    norm2_.collect(nn::join(prefix, "norm2"), out);
    norm3_.collect(nn::join(prefix, "norm3"), out);
    gate_proj_.collect(nn::join(prefix, "gate_proj"), out);
    gate_ffn_.collect(nn::join(prefix, "gate_ffn"), out);
    fuse_proj_.collect(nn::join(prefix, "fuse_proj"), out);
    dec_self_.collect(nn::join(prefix, "dec_self"), out);
    dec_cross_.collect(nn::join(prefix, "dec_cross"), out);
    norm4_.collect(nn::join(prefix, "norm4"), out);
    norm5_.collect(nn::join(prefix, "norm5"), out);
    norm6_.collect(nn::join(prefix, "norm6"), out);
    dec_ffn_.collect(nn::join(prefix, "dec_ffn"), out);
  }

  // Direct access for tests that build closed-form oracles.
  const AttentionParams& enc_cross() const { return enc_cross_; }
  const AttentionParams& enc_self() const { return enc_self_; }
  const AttentionParams& enc_out() const { return enc_out_; }
  const AttentionParams& dec_self() const { return dec_self_; }
  const AttentionParams& dec_cross() const { return dec_cross_; }
  const nn::LayerNorm& norm(int i) const {
    const nn::LayerNorm* n[] = {&norm1_, &norm2_, &norm3_, &norm4_, &norm5_, &norm6_};
    return *n[i - 1];
  }
  const nn::Linear& f_init() const { return f_init_; }
  const nn::Linear& gate_proj() const { return gate_proj_; }
  const nn::FeedForward& gate_ffn() const { return gate_ffn_; }
  const nn::Linear& fuse_proj() const { return fuse_proj_; }
  const nn::FeedForward& dec_ffn() const { return dec_ffn_; }

 private:
  Var tokens(const Var& f_t, const TemporalPrior& prior) const {
    if (f_t.value().rank() != 3 || f_t.dim(0) != cfg_.channels || f_t.dim(1) != prior.height ||
        f_t.dim(2) != prior.width)
      throw DimensionError("similarity map " + shape_str(f_t.shape()) + " does not match prior (" +
                           std::to_string(cfg_.channels) + "," + std::to_string(prior.height) + "," +
                           std::to_string(prior.width) + ")");
    if (!prior.tokens.defined()) throw std::logic_error("temporal prior is not initialized");
    return ad::tokens_from_map(f_t);
  }

  TransConfig cfg_;
  nn::Linear f_init_;
  AttentionParams enc_cross_, enc_self_, enc_out_;
  nn::LayerNorm norm1_, norm2_, norm3_;
  nn::Linear gate_proj_;
  nn::FeedForward gate_ffn_;
  nn::Linear fuse_proj_;
  AttentionParams dec_self_, dec_cross_;
  nn::LayerNorm norm4_, norm5_, norm6_;
  nn::FeedForward dec_ffn_;
};

}  // namespace tctrack
