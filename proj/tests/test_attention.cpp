#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tctrack/attention.hpp"
#include "tctrack/gradcheck.hpp"
#include "tctrack/testing/oracles.hpp"
#include "test_util.hpp"

using namespace tctrack;
using test::tensors_near;

namespace {

Var c(const Tensor& t) { return ad::constant(t); }

std::vector<Tensor> values(const std::vector<Var>& vs) {
  std::vector<Tensor> out;
  for (const auto& v : vs) out.push_back(v.value());
  return out;
}

}  // namespace

TEST(Attention, SingleKeyReturnsTheValueRow) {
  Rng rng(1);
  const Tensor q = random_normal({3, 4}, rng), k = random_normal({1, 4}, rng), v = random_normal({1, 4}, rng);
  const Tensor out = scaled_dot_attention(c(q), c(k), c(v), 4.0).value();
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), v.at(0, j), 1e-15);
}

TEST(Attention, IdenticalKeysAverageTheValues) {
  Rng rng(2);
  const Tensor q = random_normal({2, 5}, rng), row = random_normal({1, 5}, rng), v = random_normal({4, 5}, rng);
  Tensor k({4, 5});
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 5; ++j) k.at(i, j) = row.at(0, j);
  const Tensor out = scaled_dot_attention(c(q), c(k), c(v), 5.0).value();
  for (std::int64_t j = 0; j < 5; ++j) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < 4; ++i) mean += v.at(i, j) / 4.0;
    EXPECT_NEAR(out.at(0, j), mean, 1e-12);
    EXPECT_NEAR(out.at(1, j), mean, 1e-12);
  }
}

TEST(Attention, MatchesBruteForce) {
  Rng rng(3);
  const Tensor q = random_normal({3, 4}, rng), k = random_normal({3, 4}, rng), v = random_normal({3, 4}, rng);
  EXPECT_TRUE(tensors_near(scaled_dot_attention(c(q), c(k), c(v), 4.0).value(), oracle::attention(q, k, v, 4.0), 1e-12));
}

TEST(Attention, ZeroValuesGiveZeroOutput) {
  Rng rng(4);
  const Tensor q = random_normal({3, 6}, rng), k = random_normal({5, 6}, rng);
  const Tensor out = scaled_dot_attention(c(q), c(k), c(Tensor::zeros({5, 6})), 6.0).value();
  EXPECT_EQ(out.max_abs(), 0.0);
}

TEST(Attention, SoftmaxRowsSumToOne) {
  Rng rng(5);
  const Tensor logits = random_normal({7, 9}, rng, 5.0);
  const Tensor p = ad::softmax_rows(c(logits)).value();
  for (std::int64_t i = 0; i < 7; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < 9; ++j) {
      EXPECT_GE(p.at(i, j), 0.0);
      s += p.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Attention, InvariantToKeyValuePermutation) {
  Rng rng(6);
  const Tensor q = random_normal({4, 5}, rng), k = random_normal({6, 5}, rng), v = random_normal({6, 5}, rng);
  std::vector<std::int64_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor kp({6, 5}), vp({6, 5});
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t j = 0; j < 5; ++j) {
      kp.at(i, j) = k.at(perm[static_cast<std::size_t>(i)], j);
      vp.at(i, j) = v.at(perm[static_cast<std::size_t>(i)], j);
    }
  EXPECT_TRUE(tensors_near(scaled_dot_attention(c(q), c(kp), c(vp), 5.0).value(),
                           scaled_dot_attention(c(q), c(k), c(v), 5.0).value(), 1e-12));
}

TEST(Attention, SoftmaxIgnoresConstantLogitShift) {
  Rng rng(7);
  const Tensor logits = random_normal({3, 8}, rng);
  Tensor shifted = logits;
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 8; ++j) shifted.at(i, j) += 10.0 * static_cast<double>(i + 1);
  EXPECT_TRUE(tensors_near(ad::softmax_rows(c(shifted)).value(), ad::softmax_rows(c(logits)).value(), 1e-12));
}

TEST(Attention, LargeLogitsStayFinite) {
  Tensor q = Tensor::full({2, 3}, 1e3), k = Tensor::full({4, 3}, 1e3);
  k.at(0, 0) = -1e3;
  Rng rng(8);
  const Tensor v = random_normal({4, 3}, rng);
  EXPECT_TRUE(scaled_dot_attention(c(q), c(k), c(v), 3.0).value().all_finite());
}

TEST(Attention, RejectsMismatchedShapesAndNonFiniteInput) {
  const Tensor a = Tensor::ones({2, 3});
  EXPECT_THROW(scaled_dot_attention(c(a), c(Tensor::ones({2, 4})), c(Tensor::ones({2, 4})), 3.0), DimensionError);
  EXPECT_THROW(scaled_dot_attention(c(a), c(a), c(Tensor::ones({3, 3})), 3.0), DimensionError);
  Tensor bad = a;
  bad.at(1, 1) = std::nan("");
  EXPECT_THROW(scaled_dot_attention(c(a), c(bad), c(a), 3.0), NumericError);
}

TEST(MultiHead, SingleHeadWithIdentityProjectionsIsPlainAttention) {
  Rng rng(9);
  AttentionParams p(4, 1, rng);
  Tensor eye({4, 4});
  for (std::int64_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  p.wq[0] = c(eye);
  p.wk[0] = c(eye);
  p.wv[0] = c(eye);
  p.wo = c(eye);
  const Tensor q = random_normal({3, 4}, rng), k = random_normal({5, 4}, rng), v = random_normal({5, 4}, rng);
  EXPECT_DOUBLE_EQ(p.d, 4.0);
  EXPECT_TRUE(tensors_near(multi_head(c(q), c(k), c(v), p).value(), oracle::attention(q, k, v, 4.0), 1e-12));
}

TEST(MultiHead, TwoHeadsMatchPerHeadOracle) {
  Rng rng(10);
  AttentionParams p(6, 2, rng);
  EXPECT_EQ(p.head_channels(), 3);
  const Tensor q = random_normal({4, 6}, rng), k = random_normal({4, 6}, rng), v = random_normal({4, 6}, rng);
  const Tensor want = oracle::multi_head(q, k, v, values(p.wq), values(p.wk), values(p.wv), p.wo.value(), 3.0);
  EXPECT_TRUE(tensors_near(multi_head(c(q), c(k), c(v), p).value(), want, 1e-12));
}

TEST(MultiHead, OutputLengthFollowsQuery) {
  Rng rng(11);
  AttentionParams p(12, 3, rng);
  const Var out = multi_head(c(random_normal({7, 12}, rng)), c(random_normal({2, 12}, rng)),
                             c(random_normal({2, 12}, rng)), p);
  EXPECT_EQ(out.shape(), (Shape{7, 12}));
}

TEST(MultiHead, HeadCountMustDivideChannels) {
  Rng rng(12);
  EXPECT_THROW(AttentionParams(10, 3, rng), ConfigError);
  EXPECT_THROW(AttentionParams(10, 0, rng), ConfigError);
}

TEST(MultiHead, RejectsInputsWithWrongWidth) {
  Rng rng(13);
  AttentionParams p(6, 2, rng);
  const Var bad = c(Tensor::ones({3, 5}));
  EXPECT_THROW(multi_head(bad, bad, bad, p), DimensionError);
}

TEST(MultiHead, GradientsMatchFiniteDifferences) {
  const GradCheckResult r = gradcheck_multi_head(21);
  EXPECT_TRUE(r.passed) << r.worst << " rel err " << r.max_rel_error;
  EXPECT_GT(r.checked, 0u);
}
