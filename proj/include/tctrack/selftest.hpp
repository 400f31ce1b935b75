#pragma once

// Oracle fixtures run by `tctrack selftest`.

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "tctrack/attention.hpp"
#include "tctrack/metrics.hpp"
#include "tctrack/online.hpp"
#include "tctrack/temporal_conv.hpp"
#include "tctrack/testing/oracles.hpp"

namespace tctrack {

struct SelftestRow {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

namespace detail {

inline SelftestRow compare(const std::string& name, const Tensor& got, const Tensor& want, double tol) {
  const double err = got.shape() == want.shape() ? max_abs_diff(got, want) : 1e300;
  return {name, err, tol, err <= tol};
}

}  // namespace detail

inline std::vector<SelftestRow> run_selftest(std::uint64_t seed = 0) {
  Rng rng(seed + 77);
  std::vector<SelftestRow> rows;

  {
    const Tensor q = random_normal({5, 6}, rng), k = random_normal({7, 6}, rng), v = random_normal({7, 6}, rng);
    const Var got = scaled_dot_attention(ad::constant(q), ad::constant(k), ad::constant(v), 6.0);
    rows.push_back(detail::compare("attention", got.value(), oracle::attention(q, k, v, 6.0), 1e-12));
  }
  {
    AttentionParams p(12, 3, rng);
    const Tensor q = random_normal({4, 12}, rng), k = random_normal({9, 12}, rng), v = random_normal({9, 12}, rng);
    std::vector<Tensor> wq, wk, wv;
    for (int n = 0; n < p.heads(); ++n) {
      wq.push_back(p.wq[n].value());
      wk.push_back(p.wk[n].value());
      wv.push_back(p.wv[n].value());
    }
    const Var got = multi_head(ad::constant(q), ad::constant(k), ad::constant(v), p);
    rows.push_back(detail::compare("multi_head", got.value(), oracle::multi_head(q, k, v, wq, wk, wv, p.wo.value(), p.d),
                                   1e-12));
  }
  {
    const Tensor x = random_normal({3, 9, 8}, rng), w = random_normal({4, 3, 3, 3}, rng), b = random_normal({4}, rng);
    const Var got = ad::conv2d(ad::constant(x), ad::constant(w), ad::constant(b), 2, 1);
    rows.push_back(detail::compare("conv2d", got.value(), oracle::conv2d(x, w, b, 2, 1), 1e-12));
  }
  {
    const Tensor z = random_normal({5, 3, 3}, rng), x = random_normal({5, 8, 7}, rng);
    const Var got = ad::depthwise_xcorr(ad::constant(z), ad::constant(x));
    rows.push_back(detail::compare("depthwise_xcorr", got.value(), oracle::depthwise_xcorr(z, x), 1e-12));
  }
  {
    TadaConfig cfg;
    TemporalCalibNets nets(8, 8, cfg, rng);
    const Tensor x = random_normal({8, 11, 9}, rng);
    const TemporalCalibState st = init_state(ad::constant(x), nets);
    const Tensor want =
        oracle::pointwise(oracle::adaptive_max_pool(x, cfg.pooled_size), nets.f_init.weight.value(), nets.f_init.bias.value());
    rows.push_back(detail::compare("pool_projection", st.x_star.value(), want, 1e-12));
  }
  {
    const Tensor x = random_normal({6, 10}, rng), g = random_normal({10}, rng), b = random_normal({10}, rng);
    const Var got = ad::layer_norm_rows(ad::constant(x), ad::constant(g), ad::constant(b), 1e-5);
    rows.push_back(detail::compare("layer_norm", got.value(), oracle::layer_norm_rows(x, g, b, 1e-5), 1e-12));
  }
  {
    std::uniform_int_distribution<int> pos(0, 40), size(1, 25);
    std::vector<BoundingBox> pred, gt;
    double err = 0.0;
    for (int i = 0; i < 100; ++i) {
      const oracle::PixelBox a{pos(rng), pos(rng), size(rng), size(rng)}, b{pos(rng), pos(rng), size(rng), size(rng)};
      pred.push_back(a.center());
      gt.push_back(b.center());
      err = std::max(err, std::abs(iou(a.center(), b.center()) - oracle::pixel_iou(a, b)));
      err = std::max(err, std::abs(center_error(a.center(), b.center()) - oracle::center_error(a.center(), b.center())));
    }
    rows.push_back({"iou_cle_pixel_grid", err, 0.0, err == 0.0});

    const MetricsReport m = compute_metrics(pred, gt, EvalMode::Offline);
    std::vector<double> norm;
    for (std::size_t i = 0; i < gt.size(); ++i) norm.push_back(oracle::center_error(pred[i], gt[i]) / std::sqrt(gt[i].w * gt[i].h));
    const oracle::Scores s = oracle::scores(m.per_frame_iou, m.per_frame_cle, norm);
    double merr = std::max({std::abs(m.precision - s.precision), std::abs(m.norm_precision - s.norm_precision),
                            std::abs(m.success_auc - s.auc), std::abs(m.ao - s.ao), std::abs(m.sr50 - s.sr50),
                            std::abs(m.sr75 - s.sr75)});
    if (m.precision_curve != s.precision_curve || m.success_curve != s.success_curve ||
        m.norm_precision_curve != s.norm_precision_curve)
      merr = std::max(merr, 1.0);
    rows.push_back({"metrics", merr, 1e-12, merr <= 1e-12});
  }
  {
    // Constant latency of two frame periods over six frames.
    const double fps = 30.0, period = 1000.0 / fps;
    const auto processed = schedule_frames(6, fps, Scheduling::LatestWithSkip,
                                           [&](std::size_t, std::size_t, BoundingBox&) { return 2.0 * period; });
    const OnlinePairing p = pair_with_ground_truth(processed, 6, fps, PairingInstant::FrameEnd);
    const std::vector<std::optional<std::size_t>> want{std::nullopt, 0, 0, 2, 2, 4};
    rows.push_back({"online_pairing_2_periods", p.paired == want ? 0.0 : 1.0, 0.0, p.paired == want});
  }
  {
    const BoundingBox b = BoundingBox::from_top_left(0, 0, 4, 4);
    const bool ok = b == BoundingBox{2, 2, 4, 4};
    rows.push_back({"top_left_to_center", ok ? 0.0 : 1.0, 0.0, ok});
  }
  return rows;
}

inline bool print_selftest(const std::vector<SelftestRow>& rows, std::ostream& os) {
  bool all = true;
  os << "fixture                    error        tol          result\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s %-12.3g %-12.3g %s\n", r.name.c_str(), r.error, r.tolerance,
                  r.passed ? "PASS" : "FAIL");
    os << line;
    all = all && r.passed;
  }
  return all;
}

}  // namespace tctrack
