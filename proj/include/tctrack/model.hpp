#pragma once

// The full two-level pipeline:
//   template / search features (temporal backbone)
//   -> depth-wise correlation R_t -> F_t (adjust + channel adapter)
//   -> transformer encode/decode against the temporal prior -> heads.

#include <cstdint>
#include <string>

#include "tctrack/at_trans.hpp"
#include "tctrack/backbone.hpp"
#include "tctrack/heads_losses.hpp"

namespace tctrack {

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::alexnet();
  TadaConfig tada;
  TransConfig trans;
  TemporalMode temporal_mode = TemporalMode::Attention;
  std::uint64_t seed = 0;

  /// Full-size geometry: 127/287 patches, 256-channel backbone, 192-channel transformer.
  static ModelConfig full() { return {}; }

  /// Desk-scale geometry used for training runs and the CLI default.
  static ModelConfig toy() {
    ModelConfig cfg;
    cfg.backbone = BackboneConfig::toy();
    cfg.tada.pooled_size = 4;
    cfg.trans.channels = 12;
    return cfg;
  }

  GridGeometry grid() const {
    GridGeometry g;
    g.size = backbone.correlation_size();
    g.stride = static_cast<double>(backbone.total_stride());
    g.crop_size = static_cast<double>(backbone.search_size);
    g.anchor = static_cast<double>(backbone.template_size) / 2.0;
    return g;
  }
};

/// Per-sequence state: template features plus both temporal memories.
struct SequenceState {
  Var template_features;
  BackboneState backbone;
  TemporalPrior prior;
  std::int64_t frames_seen = 0;
};

class TCTrackModel {
 public:
  explicit TCTrackModel(const ModelConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.seed);
    backbone_ = Backbone(cfg.backbone, cfg.tada, cfg.temporal_mode, rng);
    const auto cb = cfg.backbone.out_channels();
    adjust_ = nn::Linear(cb, cb, rng);
    adapter_ = nn::Linear(cb, cfg.trans.channels, rng);
    trans_ = AtTrans(cfg.trans, cb, rng);
    heads_ = Heads(cfg.trans.channels, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  GridGeometry grid() const { return cfg_.grid(); }

  const Backbone& backbone() const { return backbone_; }
  const AtTrans& transformer() const { return trans_; }
  const Heads& heads() const { return heads_; }
  const nn::Linear& adjust() const { return adjust_; }
  const nn::Linear& adapter() const { return adapter_; }

  void set_temporal_mode(TemporalMode m) {
    cfg_.temporal_mode = m;
    backbone_.set_mode(m);
  }
  void set_swap_encoder_roles(bool s) {
    cfg_.trans.swap_encoder_roles = s;
    trans_.set_swap_encoder_roles(s);
  }

  nn::ParamList named_parameters() const {
    nn::ParamList out;
    backbone_.collect("backbone", out);
    adjust_.collect("adjust", out);
    adapter_.collect("adapter", out);
    trans_.collect("trans", out);
    heads_.collect("heads", out);
    return out;
  }

  /// Frame 1: template features, temporal backbone state, and F^m_0 = F_init(R_1).
  SequenceState start(const Var& template_patch, const Var& search_patch) const {
    SequenceState st;
    st.template_features = backbone_.extract_template(template_patch);
    auto [fx, bs] = backbone_.begin_sequence(search_patch);
    st.backbone = std::move(bs);
    st.prior = trans_.init_prior(ad::depthwise_xcorr(st.template_features, fx));
    st.frames_seen = 1;
    return st;
  }

  /// Similarity map F_t (transformer channels) for a search patch; advances the backbone state.
  Var similarity(SequenceState& st, const Var& search_patch) const {
    auto [fx, bs] = backbone_.extract_search(search_patch, st.backbone);
    st.backbone = std::move(bs);
    const SimilarityMap sim = depthwise_correlation(st.template_features, fx, adjust_);
    return nn::pointwise(adapter_, sim.adjusted);
  }

  /// Frames t >= 2: full forward pass, updating both temporal memories.
  HeadOutputs step(SequenceState& st, const Var& search_patch) const {
    if (st.frames_seen < 1) throw std::logic_error("step() before start()");
    const Var f_t = similarity(st, search_patch);
    auto [prior, refined] = trans_.step(st.prior, f_t);
    st.prior = std::move(prior);
    ++st.frames_seen;
    return heads_.forward(refined);
  }

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  nn::Linear adjust_;
  nn::Linear adapter_;
  AtTrans trans_;
  Heads heads_;
};

}  // namespace tctrack
