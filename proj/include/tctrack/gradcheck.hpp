#pragma once

// Central finite-difference gradient checks and the standard suites run by
// `tctrack gradcheck` and the test binaries.

#include <functional>
#include <string>
#include <vector>

#include "tctrack/at_trans.hpp"
#include "tctrack/attention.hpp"
#include "tctrack/heads_losses.hpp"
#include "tctrack/temporal_conv.hpp"

namespace tctrack {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-4;  // near-zero gradients are held to an absolute error of tolerance * floor
};

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<input>[<index>]"
  bool passed = false;
};

struct GradInput {
  std::string name;
  Var var;
};

/// f must rebuild its graph from the current input values on every call and return a scalar.
inline GradCheckResult check_gradients(const std::string& name, const std::function<Var()>& f,
                                       const std::vector<GradInput>& inputs, const GradCheckOptions& opt = {}) {
  GradCheckResult res;
  res.name = name;
  for (const auto& in : inputs) Var(in.var).zero_grad();
  const Var out = f();
  if (out.size() != 1) throw DimensionError("gradient check needs a scalar objective");
  ad::backward(out);
  std::vector<Tensor> analytic;
  for (const auto& in : inputs) analytic.push_back(in.var.grad());
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    Var v = inputs[a].var;
    auto& data = v.mutable_value().data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      double fp, fm;
      {
        ad::NoGradGuard ng;
        data[i] = orig + opt.step;
        fp = f().item();
        data[i] = orig - opt.step;
        fm = f().item();
      }
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double g = analytic[a][i];
      const double rel = std::abs(g - numeric) / std::max({std::abs(g), std::abs(numeric), opt.floor});
      ++res.checked;
      if (!(rel <= res.max_rel_error) || res.worst.empty()) {
        if (!(rel <= res.max_rel_error)) res.max_rel_error = std::isfinite(rel) ? rel : 1e300;
        res.worst = inputs[a].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (const auto& in : inputs) Var(in.var).zero_grad();
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

inline std::vector<GradInput> as_inputs(const nn::ParamList& params) {
  std::vector<GradInput> out;
  for (const auto& [n, p] : params) out.push_back({n, p});
  return out;
}

/// Overwrites all-zero parameters (biases, zero-initialized output layers) with small
/// random values so the whole path carries gradient.
inline void randomize_zero_params(const nn::ParamList& params, Rng& rng, double scale = 0.3) {
  for (const auto& [n, p] : params) {
    Var v = p;
    if (v.value().max_abs() == 0.0) v.mutable_value() = random_uniform(v.shape(), rng, -scale, scale);
  }
}

// Standard suites at toy dims (C <= 12, maps <= 5x5).

inline GradCheckResult gradcheck_multi_head(std::uint64_t seed = 1, const GradCheckOptions& opt = {}) {
  Rng rng(seed);
  const std::int64_t c = 12, lq = 6, lk = 9;
  AttentionParams p(c, 3, rng);
  const Var q = ad::leaf(random_normal({lq, c}, rng));
  const Var k = ad::leaf(random_normal({lk, c}, rng));
  const Var v = ad::leaf(random_normal({lk, c}, rng));
  const Tensor w = random_normal({lq, c}, rng);
  nn::ParamList params;
  p.collect("mha", params);
  auto inputs = as_inputs(params);
  inputs.push_back({"q", q});
  inputs.push_back({"k", k});
  inputs.push_back({"v", v});
  return check_gradients("multi_head", [&] { return ad::dot_const(multi_head(q, k, v, p), w); }, inputs, opt);
}

/// X*_0 -> X*_1 -> X*_2 -> alpha -> calibrated convolution of X_2.
inline GradCheckResult gradcheck_calibration(std::uint64_t seed = 2, const GradCheckOptions& opt = {}) {
  Rng rng(seed);
  const std::int64_t c_in = 8, c_out = 8, s = 5;
  TadaConfig cfg;
  cfg.pooled_size = 3;
  TemporalCalibNets nets(c_in, c_out, cfg, rng);
  nn::Conv2d base(c_in, c_out, 3, rng, 1, 1);
  nn::ParamList params;
  nets.collect("calib", params);
  base.collect("base", params);
  randomize_zero_params(params, rng);
  const Var x1 = ad::leaf(random_normal({c_in, s, s}, rng));
  const Var x2 = ad::leaf(random_normal({c_in, s, s}, rng));
  const Tensor w = random_normal({c_out, s, s}, rng);
  auto inputs = as_inputs(params);
  inputs.push_back({"x1", x1});
  inputs.push_back({"x2", x2});
  return check_gradients(
      "calibration",
      [&] {
        TemporalCalibState st = update_state(init_state(x1, nets), x1, nets);
        st = update_state(st, x2, nets);
        return ad::dot_const(att_tada_forward(x2, base, calibration_factors(st, nets)), w);
      },
      inputs, opt);
}

/// Prior init, encoder (with the information filter) and decoder over two frames.
inline GradCheckResult gradcheck_encode_decode(std::uint64_t seed = 3, const GradCheckOptions& opt = {}) {
  Rng rng(seed);
  TransConfig cfg;
  cfg.channels = 12;
  cfg.heads = 6;
  const std::int64_t raw = 6, s = 5;
  AtTrans trans(cfg, raw, rng);
  nn::ParamList params;
  trans.collect("trans", params);
  randomize_zero_params(params, rng, 0.1);
  const Var r1 = ad::leaf(random_normal({raw, s, s}, rng));
  const Var f2 = ad::leaf(random_normal({cfg.channels, s, s}, rng));
  const Var f3 = ad::leaf(random_normal({cfg.channels, s, s}, rng));
  const Tensor w = random_normal({cfg.channels, s, s}, rng);
  auto inputs = as_inputs(params);
  inputs.push_back({"r1", r1});
  inputs.push_back({"f2", f2});
  inputs.push_back({"f3", f3});
  return check_gradients(
      "encode_decode",
      [&] {
        const TemporalPrior p1 = trans.encode(trans.init_prior(r1), f2);
        return ad::dot_const(trans.decode(trans.encode(p1, f3), f3), w);
      },
      inputs, opt);
}

struct LossFixture {
  GridGeometry geom;
  GroundTruthTargets targets;
  Var cls1, cls2, loc;
};

inline LossFixture make_loss_fixture(std::uint64_t seed) {
  Rng rng(seed);
  LossFixture fx;
  fx.geom.size = 5;
  fx.geom.stride = 4.0;
  fx.geom.crop_size = 31.0;
  fx.geom.anchor = 8.0;
  fx.targets = make_targets({15.3, 16.1, 9.7, 8.2}, fx.geom);
  fx.cls1 = ad::leaf(random_normal({2, 5, 5}, rng));
  fx.cls2 = ad::leaf(random_normal({1, 5, 5}, rng));
  fx.loc = ad::leaf(random_normal({4, 5, 5}, rng, 0.3));
  return fx;
}

inline std::vector<GradCheckResult> gradcheck_losses(std::uint64_t seed = 4, const GradCheckOptions& opt = {}) {
  const LossFixture fx = make_loss_fixture(seed);
  return {
      check_gradients("loss_cls1", [&] { return loss_cls(fx.cls1, fx.cls2, fx.targets).first; }, {{"cls1", fx.cls1}}, opt),
      check_gradients("loss_cls2", [&] { return loss_cls(fx.cls1, fx.cls2, fx.targets).second; }, {{"cls2", fx.cls2}}, opt),
      check_gradients("loss_loc1", [&] { return loss_loc1(fx.loc, fx.targets, fx.geom); }, {{"loc", fx.loc}}, opt),
      check_gradients("loss_loc2", [&] { return loss_loc2(fx.loc, fx.targets, fx.geom); }, {{"loc", fx.loc}}, opt),
  };
}

inline std::vector<GradCheckResult> run_gradcheck_suites(std::uint64_t seed = 0, const GradCheckOptions& opt = {}) {
  std::vector<GradCheckResult> out;
  out.push_back(gradcheck_multi_head(seed + 1, opt));
  out.push_back(gradcheck_calibration(seed + 2, opt));
  out.push_back(gradcheck_encode_decode(seed + 3, opt));
  for (auto& r : gradcheck_losses(seed + 4, opt)) out.push_back(std::move(r));
  return out;
}

}  // namespace tctrack
