#include <gtest/gtest.h>

#include <cmath>

#include "tctrack/checkpoint.hpp"
#include "tctrack/gradcheck.hpp"
#include "tctrack/temporal_conv.hpp"
#include "tctrack/testing/oracles.hpp"
#include "test_util.hpp"

using namespace tctrack;
using test::tensors_equal;
using test::tensors_near;

namespace {

Var c(const Tensor& t) { return ad::constant(t); }

TadaConfig small_config(std::int64_t s = 4) {
  TadaConfig cfg;
  cfg.pooled_size = s;
  cfg.channel_reduction = 2;
  cfg.head_reduction = 2;
  return cfg;
}

nn::ParamList params_of(const TemporalCalibNets& nets) {
  nn::ParamList p;
  nets.collect("calib", p);
  return p;
}

nn::ParamList params_of(const OnlineTadaNets& nets) {
  nn::ParamList p;
  nets.collect("queue", p);
  return p;
}

// alpha = fc2(relu(fc1(desc))) + 1 with plain loops.
Tensor head_oracle(const nn::FeedForward& ff, const std::vector<double>& desc) {
  const Tensor& w1 = ff.fc1.weight.value();
  const Tensor& b1 = ff.fc1.bias.value();
  const Tensor& w2 = ff.fc2.weight.value();
  const Tensor& b2 = ff.fc2.bias.value();
  std::vector<double> h(static_cast<std::size_t>(w1.dim(1)));
  for (std::int64_t j = 0; j < w1.dim(1); ++j) {
    double acc = b1[static_cast<std::size_t>(j)];
    for (std::int64_t i = 0; i < w1.dim(0); ++i) acc += desc[static_cast<std::size_t>(i)] * w1.at(i, j);
    h[static_cast<std::size_t>(j)] = std::max(acc, 0.0);
  }
  Tensor out({w2.dim(1)});
  for (std::int64_t o = 0; o < w2.dim(1); ++o) {
    double acc = b2[static_cast<std::size_t>(o)] + 1.0;
    for (std::int64_t j = 0; j < w2.dim(0); ++j) acc += h[static_cast<std::size_t>(j)] * w2.at(j, o);
    out[static_cast<std::size_t>(o)] = acc;
  }
  return out;
}

std::vector<double> channel_means(const Tensor& x) {
  std::vector<double> m(static_cast<std::size_t>(x.dim(0)), 0.0);
  const double n = static_cast<double>(x.dim(1) * x.dim(2));
  for (std::int64_t ch = 0; ch < x.dim(0); ++ch)
    for (std::int64_t y = 0; y < x.dim(1); ++y)
      for (std::int64_t xx = 0; xx < x.dim(2); ++xx) m[static_cast<std::size_t>(ch)] += x.at(ch, y, xx) / n;
  return m;
}

// Conv with weights scaled per output channel, via the conv oracle.
Tensor calibrated_conv_oracle(const Tensor& x, const nn::Conv2d& base, const Tensor& aw, const Tensor& ab) {
  Tensor w = base.weight.value(), b = base.bias.value();
  const std::size_t per = w.size() / static_cast<std::size_t>(w.dim(0));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] *= aw[i / per];
  for (std::size_t o = 0; o < b.size(); ++o) b[o] *= ab[o];
  return oracle::conv2d(x, w, b, base.stride, base.pad);
}

}  // namespace

TEST(TemporalState, ConstantInputGivesSpatiallyConstantState) {
  Rng rng(1);
  TemporalCalibNets nets(6, 6, small_config(), rng);
  const TemporalCalibState st = init_state(c(Tensor::full({6, 9, 9}, 0.7)), nets);
  const Tensor& x = st.x_star.value();
  ASSERT_EQ(x.shape(), (Shape{3, 4, 4}));
  for (std::int64_t o = 0; o < 3; ++o) {
    double want = nets.f_init.bias.value()[static_cast<std::size_t>(o)];
    for (std::int64_t i = 0; i < 6; ++i) want += 0.7 * nets.f_init.weight.value().at(i, o);
    for (std::int64_t y = 0; y < 4; ++y)
      for (std::int64_t xx = 0; xx < 4; ++xx) EXPECT_NEAR(x.at(o, y, xx), want, 1e-12);
  }
}

TEST(TemporalState, ZeroInputGivesZeroState) {
  Rng rng(2);
  TemporalCalibNets nets(4, 4, small_config(), rng);
  EXPECT_EQ(init_state(c(Tensor::zeros({4, 8, 8})), nets).x_star.value().max_abs(), 0.0);
}

TEST(TemporalState, InitMatchesPoolThenProjectOracle) {
  Rng rng(3);
  TemporalCalibNets nets(4, 8, small_config(4), rng);
  const Tensor x = random_normal({4, 8, 8}, rng);
  const Tensor want =
      oracle::pointwise(oracle::adaptive_max_pool(x, 4), nets.f_init.weight.value(), nets.f_init.bias.value());
  EXPECT_TRUE(tensors_near(init_state(c(x), nets).x_star.value(), want, 1e-12));
}

TEST(TemporalState, InitPoolsNonDivisibleSizes) {
  Rng rng(4);
  TemporalCalibNets nets(4, 4, small_config(3), rng);
  const Tensor x = random_normal({4, 7, 11}, rng);
  const Tensor want =
      oracle::pointwise(oracle::adaptive_max_pool(x, 3), nets.f_init.weight.value(), nets.f_init.bias.value());
  EXPECT_TRUE(tensors_near(init_state(c(x), nets).x_star.value(), want, 1e-12));
}

TEST(TemporalState, SingleSlotUpdateReturnsProjectedMemory) {
  Rng rng(5);
  TemporalCalibNets nets(4, 4, small_config(1), rng);
  const TemporalCalibState s0 = init_state(c(random_normal({4, 6, 6}, rng)), nets);
  const TemporalCalibState s1 = update_state(s0, c(random_normal({4, 6, 6}, rng)), nets);
  const Tensor want = oracle::pointwise(s0.x_star.value(), nets.f_v.weight.value(), nets.f_v.bias.value());
  EXPECT_TRUE(tensors_near(s1.x_star.value(), want, 1e-12));
}

TEST(TemporalState, UpdateMatchesAttentionOracle) {
  Rng rng(6);
  TemporalCalibNets nets(8, 8, small_config(2), rng);
  randomize_zero_params(params_of(nets), rng);
  const Tensor x1 = random_normal({8, 6, 6}, rng), x2 = random_normal({8, 6, 6}, rng);
  const TemporalCalibState s0 = init_state(c(x1), nets);
  const TemporalCalibState s1 = update_state(s0, c(x2), nets);

  auto tokens = [](const Tensor& m) {
    Tensor t({m.dim(1) * m.dim(2), m.dim(0)});
    for (std::int64_t ch = 0; ch < m.dim(0); ++ch)
      for (std::int64_t y = 0; y < m.dim(1); ++y)
        for (std::int64_t xx = 0; xx < m.dim(2); ++xx) t.at(y * m.dim(2) + xx, ch) = m.at(ch, y, xx);
    return t;
  };
  auto affine = [](const Tensor& t, const nn::Linear& l) {
    Tensor out = oracle::matmul(t, l.weight.value());
    for (std::int64_t i = 0; i < out.dim(0); ++i)
      for (std::int64_t j = 0; j < out.dim(1); ++j) out.at(i, j) += l.bias.value()[static_cast<std::size_t>(j)];
    return out;
  };
  const Tensor q = affine(tokens(oracle::adaptive_max_pool(x2, 2)), nets.f_q);
  const Tensor mem = tokens(s0.x_star.value());
  const Tensor att = oracle::attention(q, affine(mem, nets.f_k), affine(mem, nets.f_v), 4.0);
  EXPECT_TRUE(tensors_near(tokens(s1.x_star.value()), att, 1e-12));
}

TEST(TemporalState, FootprintIsIndependentOfSequenceLength) {
  Rng rng(7);
  TemporalCalibNets nets(4, 4, small_config(), rng);
  ad::NoGradGuard ng;
  auto run = [&](int frames) {
    Rng data(99);
    TemporalCalibState s = init_state(c(random_normal({4, 8, 8}, data)), nets);
    s = update_state(s, c(random_normal({4, 8, 8}, data)), nets);
    for (int t = 1; t < frames; ++t) s = update_state(s, c(random_normal({4, 8, 8}, data)), nets);
    return s;
  };
  const TemporalCalibState a = run(10), b = run(1000);
  EXPECT_EQ(a.x_star.shape(), b.x_star.shape());
  EXPECT_EQ(serialize(state_tensors(a)).size(), serialize(state_tensors(b)).size());
}

TEST(TemporalState, UpdateDependsOnFrameOrder) {
  Rng rng(8);
  TemporalCalibNets nets(4, 4, small_config(2), rng);
  const Var x1 = c(random_normal({4, 8, 8}, rng)), x2 = c(random_normal({4, 8, 8}, rng)),
            x3 = c(random_normal({4, 8, 8}, rng));
  const TemporalCalibState s0 = init_state(x1, nets);
  const Tensor a = update_state(update_state(s0, x2, nets), x3, nets).x_star.value();
  const Tensor b = update_state(update_state(s0, x3, nets), x2, nets).x_star.value();
  EXPECT_GT(max_abs_diff(a, b), 1e-3);
}

TEST(TemporalState, RejectsUninitializedStateAndTinyInputs) {
  Rng rng(9);
  TemporalCalibNets nets(4, 4, small_config(4), rng);
  EXPECT_THROW(update_state(TemporalCalibState{}, c(Tensor::ones({4, 8, 8})), nets), std::logic_error);
  EXPECT_THROW(calibration_factors(TemporalCalibState{}, nets), std::logic_error);
  EXPECT_THROW(init_state(c(Tensor::ones({4, 3, 8})), nets), ConfigError);
}

TEST(CalibrationFactors, FreshNetsGiveOnes) {
  Rng rng(10);
  TemporalCalibNets nets(4, 6, small_config(), rng);
  const TemporalCalibState s = init_state(c(random_normal({4, 8, 8}, rng)), nets);
  const CalibrationFactors f = calibration_factors(s, nets);
  EXPECT_TRUE(tensors_equal(f.alpha_w.value(), Tensor::ones({6})));
  EXPECT_TRUE(tensors_equal(f.alpha_b.value(), Tensor::ones({6})));
}

TEST(CalibrationFactors, ConstantStateMatchesClosedForm) {
  Rng rng(11);
  TemporalCalibNets nets(4, 6, small_config(), rng);
  randomize_zero_params(params_of(nets), rng);
  Tensor xs({2, 4, 4});
  for (std::int64_t y = 0; y < 4; ++y)
    for (std::int64_t x = 0; x < 4; ++x) {
      xs.at(0, y, x) = 0.4;
      xs.at(1, y, x) = -1.3;
    }
  const CalibrationFactors f = calibration_factors(TemporalCalibState{c(xs)}, nets);
  EXPECT_TRUE(tensors_near(f.alpha_w.value(), head_oracle(nets.f_w, {0.4, -1.3}), 1e-12));
  EXPECT_TRUE(tensors_near(f.alpha_b.value(), head_oracle(nets.f_b, {0.4, -1.3}), 1e-12));
}

TEST(CalibrationFactors, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  TemporalCalibNets nets(4, 6, small_config(), rng);
  const nn::ParamList p = params_of(nets);
  randomize_zero_params(p, rng);
  const Var xs = ad::leaf(random_normal({2, 4, 4}, rng));
  const Tensor r1 = random_normal({6}, rng), r2 = random_normal({6}, rng);
  auto inputs = as_inputs(p);
  inputs.push_back({"x_star", xs});
  const GradCheckResult res = check_gradients(
      "factors",
      [&] {
        const CalibrationFactors f = calibration_factors(TemporalCalibState{xs}, nets);
        return ad::add(ad::dot_const(f.alpha_w, r1), ad::dot_const(f.alpha_b, r2));
      },
      inputs);
  EXPECT_TRUE(res.passed) << res.worst << " rel err " << res.max_rel_error;
}

TEST(CalibratedConv, UnitFactorsAreBitIdenticalToPlainConv) {
  Rng rng(13);
  nn::Conv2d base(3, 5, 3, rng, 1, 1);
  const Var x = c(random_normal({3, 7, 7}, rng));
  EXPECT_TRUE(tensors_equal(att_tada_forward(x, base, CalibrationFactors::identity(5)).value(), base(x).value()));
}

TEST(CalibratedConv, DoublingWeightsWithZeroBiasDoublesOutput) {
  Rng rng(14);
  nn::Conv2d base(3, 4, 3, rng, 2, 1, nn::BiasInit::Zero);
  const Var x = c(random_normal({3, 9, 9}, rng));
  const CalibrationFactors f{c(Tensor::full({4}, 2.0)), c(random_normal({4}, rng))};
  Tensor want = base(x).value();
  for (auto& v : want.data()) v *= 2.0;
  EXPECT_TRUE(tensors_near(att_tada_forward(x, base, f).value(), want, 1e-12));
}

TEST(CalibratedConv, PointwiseKernelMatchesScalarArithmetic) {
  Rng rng(15);
  nn::Conv2d base(2, 3, 1, rng);
  const Tensor x = random_normal({2, 2, 2}, rng);
  const Tensor aw = random_normal({3}, rng), ab = random_normal({3}, rng);
  const Tensor out = att_tada_forward(c(x), base, {c(aw), c(ab)}).value();
  const Tensor& w = base.weight.value();
  for (std::int64_t o = 0; o < 3; ++o)
    for (std::int64_t y = 0; y < 2; ++y)
      for (std::int64_t xx = 0; xx < 2; ++xx) {
        double want = ab[static_cast<std::size_t>(o)] * base.bias.value()[static_cast<std::size_t>(o)];
        for (std::int64_t i = 0; i < 2; ++i) want += aw[static_cast<std::size_t>(o)] * w[static_cast<std::size_t>(o * 2 + i)] * x.at(i, y, xx);
        EXPECT_NEAR(out.at(o, y, xx), want, 1e-12);
      }
}

TEST(CalibratedConv, MatchesConvOracleWithRandomFactors) {
  Rng rng(16);
  nn::Conv2d base(3, 4, 3, rng, 1, 1);
  const Tensor x = random_normal({3, 6, 5}, rng), aw = random_normal({4}, rng), ab = random_normal({4}, rng);
  EXPECT_TRUE(tensors_near(att_tada_forward(c(x), base, {c(aw), c(ab)}).value(),
                           calibrated_conv_oracle(x, base, aw, ab), 1e-12));
}

TEST(CalibratedConv, FreshLayerEqualsItsBaseConvolution) {
  Rng rng(17);
  TemporalCalibNets nets(4, 6, small_config(), rng);
  nn::Conv2d base(4, 6, 3, rng, 1, 1);
  const Var x1 = c(random_normal({4, 8, 8}, rng)), x2 = c(random_normal({4, 8, 8}, rng));
  const TemporalCalibState s = update_state(init_state(x1, nets), x2, nets);
  EXPECT_TRUE(tensors_equal(att_tada_forward(x2, base, calibration_factors(s, nets)).value(), base(x2).value()));
}

TEST(CalibratedConv, RejectsFactorCountMismatch) {
  Rng rng(18);
  nn::Conv2d base(3, 4, 3, rng);
  EXPECT_THROW(att_tada_forward(c(Tensor::ones({3, 5, 5})), base, CalibrationFactors::identity(3)), DimensionError);
}

TEST(QueueVariant, SingleSlotQueueUsesOnlyTheCurrentFrame) {
  Rng rng(19);
  TadaConfig cfg = small_config();
  cfg.queue_length = 1;
  OnlineTadaNets nets(3, 4, cfg, rng);
  randomize_zero_params(params_of(nets), rng);
  nn::Conv2d base(3, 4, 3, rng, 1, 1);
  DescriptorQueue q;
  online_tada_forward(q, c(random_normal({3, 6, 6}, rng)), base, nets);
  const Tensor x = random_normal({3, 6, 6}, rng);
  const Tensor out = online_tada_forward(q, c(x), base, nets).value();
  ASSERT_EQ(q.items.size(), 1u);

  const std::vector<double> d = channel_means(x);
  nn::FeedForward w_head, b_head;
  w_head.fc1.weight = nets.taps[0];
  w_head.fc1.bias = nets.tap_bias;
  w_head.fc2 = nets.out_w;
  b_head.fc1 = w_head.fc1;
  b_head.fc2 = nets.out_b;
  EXPECT_TRUE(tensors_near(out, calibrated_conv_oracle(x, base, head_oracle(w_head, d), head_oracle(b_head, d)), 1e-12));
}

TEST(QueueVariant, FreshNetsGivePlainConvolution) {
  Rng rng(20);
  OnlineTadaNets nets(3, 4, small_config(), rng);
  nn::Conv2d base(3, 4, 3, rng, 1, 1);
  DescriptorQueue q;
  for (int t = 0; t < 4; ++t) {
    const Var x = c(random_normal({3, 5, 5}, rng));
    EXPECT_TRUE(tensors_equal(online_tada_forward(q, x, base, nets).value(), base(x).value()));
  }
}

TEST(QueueVariant, ThreeSlotWindowMatchesSlidingOracle) {
  Rng rng(21);
  TadaConfig cfg = small_config();
  cfg.queue_length = 3;
  OnlineTadaNets nets(3, 4, cfg, rng);
  randomize_zero_params(params_of(nets), rng);
  nn::Conv2d base(3, 4, 3, rng, 1, 1);
  DescriptorQueue q;
  std::vector<std::vector<double>> history;
  const auto hidden = static_cast<std::int64_t>(nets.tap_bias.size());
  for (int t = 0; t < 6; ++t) {
    const Tensor x = random_normal({3, 5, 5}, rng);
    history.push_back(channel_means(x));
    const Tensor out = online_tada_forward(q, c(x), base, nets).value();
    EXPECT_EQ(q.items.size(), static_cast<std::size_t>(std::min(t + 1, 3)));

    std::vector<double> h(static_cast<std::size_t>(hidden));
    for (std::int64_t k = 0; k < hidden; ++k) {
      double acc = nets.tap_bias.value()[static_cast<std::size_t>(k)];
      for (int j = 0; j < 3 && j <= t; ++j)
        for (std::int64_t i = 0; i < 3; ++i)
          acc += history[static_cast<std::size_t>(t - j)][static_cast<std::size_t>(i)] * nets.taps[static_cast<std::size_t>(j)].value().at(i, k);
      h[static_cast<std::size_t>(k)] = std::max(acc, 0.0);
    }
    Tensor aw({4}), ab({4});
    for (std::int64_t o = 0; o < 4; ++o) {
      double w = 1.0 + nets.out_w.bias.value()[static_cast<std::size_t>(o)];
      double b = 1.0 + nets.out_b.bias.value()[static_cast<std::size_t>(o)];
      for (std::int64_t k = 0; k < hidden; ++k) {
        w += h[static_cast<std::size_t>(k)] * nets.out_w.weight.value().at(k, o);
        b += h[static_cast<std::size_t>(k)] * nets.out_b.weight.value().at(k, o);
      }
      aw[static_cast<std::size_t>(o)] = w;
      ab[static_cast<std::size_t>(o)] = b;
    }
    EXPECT_TRUE(tensors_near(out, calibrated_conv_oracle(x, base, aw, ab), 1e-12)) << "frame " << t;
  }
}

TEST(QueueVariant, EmptyQueueGivesIdentityFactors) {
  Rng rng(22);
  OnlineTadaNets nets(3, 4, small_config(), rng);
  const CalibrationFactors f = online_calibration(DescriptorQueue{}, nets);
  EXPECT_TRUE(tensors_equal(f.alpha_w.value(), Tensor::ones({4})));
}

TEST(QueueVariant, RejectsZeroLengthQueue) {
  Rng rng(23);
  TadaConfig cfg = small_config();
  cfg.queue_length = 0;
  EXPECT_THROW(OnlineTadaNets(3, 4, cfg, rng), ConfigError);
}

TEST(CalibrationPath, GradientsMatchFiniteDifferences) {
  const GradCheckResult r = gradcheck_calibration(31);
  EXPECT_TRUE(r.passed) << r.worst << " rel err " << r.max_rel_error;
}
