#pragma once

// Siamese feature extraction and depth-wise correlation.
//
// The backbone is a plain stack of conv / relu / max-pool layers whose
// temporal layers (normally the last two convolutions) carry per-frame
// calibration. The template branch always uses identity factors.

#include <string>
#include <utility>
#include <vector>

#include "tctrack/temporal_conv.hpp"

namespace tctrack {

enum class LayerKind { Conv, TemporalConv, MaxPool, ReLU };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::int64_t out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  static LayerSpec conv(std::int64_t c, int k, int s = 1, int p = 0) { return {LayerKind::Conv, c, k, s, p}; }
  static LayerSpec temporal(std::int64_t c, int k, int s = 1, int p = 0) {
    return {LayerKind::TemporalConv, c, k, s, p};
  }
  static LayerSpec pool(int k, int s) { return {LayerKind::MaxPool, 0, k, s, 0}; }
  static LayerSpec relu() { return {LayerKind::ReLU, 0, 1, 1, 0}; }
};

/// How the temporal layers obtain their calibration factors.
enum class TemporalMode {
  Attention,  // fixed-size knowledge refreshed by cross-attention
  Queue,      // descriptors of the last L frames
  None,       // identity factors: the temporally-blind twin
};

struct BackboneConfig {
  std::int64_t in_channels = 3;
  std::int64_t template_size = 127;
  std::int64_t search_size = 287;
  std::vector<LayerSpec> layers;

  /// AlexNet-style stack with total stride 8: 127 -> 6, 287 -> 26.
  /// width_divisor narrows every layer (1 = 96/256/384/384/256).
  static BackboneConfig alexnet(int width_divisor = 1) {
    auto w = [width_divisor](std::int64_t c) { return std::max<std::int64_t>(1, c / width_divisor); };
    BackboneConfig cfg;
    cfg.layers = {LayerSpec::conv(w(96), 11, 2), LayerSpec::relu(),         LayerSpec::pool(3, 2),
                  LayerSpec::conv(w(256), 5),    LayerSpec::relu(),         LayerSpec::pool(3, 2),
                  LayerSpec::conv(w(384), 3),    LayerSpec::relu(),         LayerSpec::temporal(w(384), 3),
                  LayerSpec::relu(),             LayerSpec::temporal(w(256), 3)};
    return cfg;
  }

  /// Desk-scale stack with total stride 4: 31 -> 5, 63 -> 13, correlation 9 x 9.
  static BackboneConfig toy() {
    BackboneConfig cfg;
    cfg.template_size = 31;
    cfg.search_size = 63;
    cfg.layers = {LayerSpec::conv(8, 3, 2),        LayerSpec::relu(), LayerSpec::pool(3, 2),
                  LayerSpec::conv(16, 3),          LayerSpec::relu(), LayerSpec::temporal(16, 3, 1, 1),
                  LayerSpec::relu(),               LayerSpec::temporal(16, 3, 1, 1)};
    return cfg;
  }

  int total_stride() const {
    int s = 1;
    for (const auto& l : layers) s *= l.stride;
    return s;
  }

  /// Spatial output size for a square input, by layer arithmetic alone.
  std::int64_t output_size(std::int64_t input) const {
    std::int64_t n = input;
    for (const auto& l : layers) {
      if (l.kind == LayerKind::ReLU) continue;
      n = (n + 2 * l.pad - l.kernel) / l.stride + 1;
      if (n < 1) throw ConfigError("backbone collapses a " + std::to_string(input) + "px input to nothing");
    }
    return n;
  }

  std::int64_t out_channels() const {
    std::int64_t c = in_channels;
    for (const auto& l : layers)
      if (l.kind == LayerKind::Conv || l.kind == LayerKind::TemporalConv) c = l.out_channels;
    return c;
  }

  std::int64_t template_feature_size() const { return output_size(template_size); }
  std::int64_t search_feature_size() const { return output_size(search_size); }
  std::int64_t correlation_size() const { return search_feature_size() - template_feature_size() + 1; }
};

/// Temporal state of every temporal layer for one sequence.
struct BackboneState {
  std::vector<TemporalCalibState> calib;
  std::vector<DescriptorQueue> queues;
  bool initialized = false;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig cfg, const TadaConfig& tada, TemporalMode mode, Rng& rng)
      : cfg_(std::move(cfg)), mode_(mode) {
    std::int64_t c = cfg_.in_channels;
    for (const auto& spec : cfg_.layers) {
      Layer layer{spec, {}, {}, {}};
      if (spec.kind == LayerKind::Conv || spec.kind == LayerKind::TemporalConv) {
        if (spec.kernel < 1 || spec.kernel % 2 == 0)
          throw ConfigError("backbone kernels must be odd, got " + std::to_string(spec.kernel));
        layer.conv = nn::Conv2d(c, spec.out_channels, spec.kernel, rng, spec.stride, spec.pad);
        if (spec.kind == LayerKind::TemporalConv) {
          layer.calib = TemporalCalibNets(c, spec.out_channels, tada, rng);
          layer.queue = OnlineTadaNets(c, spec.out_channels, tada, rng);
          ++temporal_layers_;
        }
        c = spec.out_channels;
      }
      layers_.push_back(std::move(layer));
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  TemporalMode mode() const { return mode_; }
  void set_mode(TemporalMode m) { mode_ = m; }
  std::size_t temporal_layer_count() const { return temporal_layers_; }

  /// Template features; temporal layers run with identity factors.
  Var extract_template(const Var& z) const {
    check_input(z, cfg_.template_size, "template");
    return run(z, nullptr, false, TemporalMode::None);
  }

  /// Frame-1 search features: initializes every temporal state from this frame, then
  /// refreshes it with the same frame before convolving.
  std::pair<Var, BackboneState> begin_sequence(const Var& x1) const {
    check_input(x1, cfg_.search_size, "search");
    BackboneState st;
    st.calib.resize(temporal_layers_);
    st.queues.resize(temporal_layers_);
    Var f = run(x1, &st, true, mode_);
    st.initialized = true;
    return {f, std::move(st)};
  }

  std::pair<Var, BackboneState> extract_search(const Var& x, const BackboneState& state) const {
    if (!state.initialized) throw std::logic_error("extract_search called before begin_sequence");
    check_input(x, cfg_.search_size, "search");
    BackboneState st = state;
    Var f = run(x, &st, false, mode_);
    return {f, std::move(st)};
  }

  /// Same weights, every temporal layer replaced by its base convolution.
  Var extract_plain(const Var& x) const { return run(x, nullptr, false, TemporalMode::None); }

  void collect(const std::string& prefix, nn::ParamList& out) const {
    int conv_idx = 0;
    for (const auto& l : layers_) {
      if (l.spec.kind != LayerKind::Conv && l.spec.kind != LayerKind::TemporalConv) continue;
      const std::string name = nn::join(prefix, "conv" + std::to_string(++conv_idx));
      l.conv.collect(name, out);
      if (l.spec.kind == LayerKind::TemporalConv) {
        l.calib.collect(nn::join(name, "calib"), out);
        l.queue.collect(nn::join(name, "queue"), out);
      }
    }
  }

  /// Calibration networks of the i-th temporal layer.
  const TemporalCalibNets& calib_nets(std::size_t i) const { return temporal_layer(i).calib; }
  const OnlineTadaNets& queue_nets(std::size_t i) const { return temporal_layer(i).queue; }
  const nn::Conv2d& temporal_base(std::size_t i) const { return temporal_layer(i).conv; }

 private:
  struct Layer {
    LayerSpec spec;
    nn::Conv2d conv;
    TemporalCalibNets calib;
    OnlineTadaNets queue;
  };

  const Layer& temporal_layer(std::size_t i) const {
    std::size_t k = 0;
    for (const auto& l : layers_)
      if (l.spec.kind == LayerKind::TemporalConv && k++ == i) return l;
    throw std::out_of_range("no temporal layer " + std::to_string(i));
  }

  void check_input(const Var& x, std::int64_t size, const char* what) const {
    if (x.value().rank() != 3 || x.dim(0) != cfg_.in_channels || x.dim(1) != size || x.dim(2) != size)
      throw DimensionError(std::string(what) + " patch must be (" + std::to_string(cfg_.in_channels) + "," +
                           std::to_string(size) + "," + std::to_string(size) + "), got " + shape_str(x.shape()));
  }

  Var run(Var x, BackboneState* st, bool init, TemporalMode mode) const {
    std::size_t t = 0;
    for (const auto& l : layers_) {
      switch (l.spec.kind) {
        case LayerKind::ReLU:
          x = ad::relu(x);
          break;
        case LayerKind::MaxPool:
          x = ad::max_pool2d(x, l.spec.kernel, l.spec.stride);
          break;
        case LayerKind::Conv:
          x = l.conv(x);
          break;
        case LayerKind::TemporalConv: {
          if (mode == TemporalMode::None || st == nullptr) {
            x = l.conv(x);
          } else if (mode == TemporalMode::Attention) {
            auto& s = st->calib[t];
            if (init) s = init_state(x, l.calib);
            s = update_state(s, x, l.calib);
            x = att_tada_forward(x, l.conv, calibration_factors(s, l.calib));
          } else {
            x = online_tada_forward(st->queues[t], x, l.conv, l.queue);
          }
          ++t;
          break;
        }
      }
    }
    return x;
  }

  BackboneConfig cfg_;
  TemporalMode mode_ = TemporalMode::Attention;
  std::vector<Layer> layers_;
  std::size_t temporal_layers_ = 0;
};

struct SimilarityMap {
  Var raw;       // R_t: per-channel correlation
  Var adjusted;  // F_t = F(R_t)
};

/// R = f_z (depth-wise) f_x, F = adjust(R) with a channel-preserving 1x1 conv.
inline SimilarityMap depthwise_correlation(const Var& f_z, const Var& f_x, const nn::Linear& adjust) {
  Var r = ad::depthwise_xcorr(f_z, f_x);
  return {r, nn::pointwise(adjust, r)};
}

}  // namespace tctrack
