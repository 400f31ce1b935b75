#include <gtest/gtest.h>

#include <cmath>

#include "tctrack/gradcheck.hpp"
#include "tctrack/heads_losses.hpp"
#include "tctrack/testing/oracles.hpp"
#include "test_util.hpp"

using namespace tctrack;
using test::tensors_equal;

namespace {

Var c(const Tensor& t) { return ad::constant(t); }

// One-cell boxes and targets, for closed-form loss values.
DecodedBoxes one_cell(double cx, double cy, double w, double h) {
  return {c(Tensor::full({1, 1}, cx)), c(Tensor::full({1, 1}, cy)), c(Tensor::full({1, 1}, w)),
          c(Tensor::full({1, 1}, h))};
}

GroundTruthTargets one_cell_target(const BoundingBox& box, double mask = 1.0, double cls1 = 1.0, double cls2 = 1.0) {
  return {box, Tensor::full({1, 1}, cls1), Tensor::full({1, 1}, cls2), Tensor::full({1, 1}, mask)};
}

GridGeometry small_grid() {
  GridGeometry g;
  g.size = 7;
  g.stride = 4;
  g.crop_size = 31;
  g.anchor = 8;
  return g;
}

}  // namespace

TEST(Heads, OutputShapes) {
  Rng rng(1);
  Heads h(12, rng);
  const HeadOutputs out = heads_forward(h, c(random_normal({12, 21, 21}, rng)));
  EXPECT_EQ(out.cls1.shape(), (Shape{2, 21, 21}));
  EXPECT_EQ(out.cls2.shape(), (Shape{1, 21, 21}));
  EXPECT_EQ(out.loc.shape(), (Shape{4, 21, 21}));
}

TEST(Heads, Deterministic) {
  Rng r1(2), r2(2), data(3);
  Heads a(6, r1), b(6, r2);
  const Var x = c(random_normal({6, 5, 5}, data));
  EXPECT_TRUE(tensors_equal(a.forward(x).loc.value(), b.forward(x).loc.value()));
  EXPECT_TRUE(tensors_equal(a.forward(x).cls1.value(), a.forward(x).cls1.value()));
}

TEST(Heads, ZeroInputGivesSpatiallyUniformInteriorOutputs) {
  Rng rng(4);
  Heads h(6, rng);
  const HeadOutputs out = h.forward(c(Tensor::zeros({6, 7, 7})));
  for (const Var* v : {&out.cls1, &out.cls2, &out.loc}) {
    const Tensor& t = v->value();
    for (std::int64_t ch = 0; ch < t.dim(0); ++ch)
      for (std::int64_t y = 1; y < 6; ++y)
        for (std::int64_t x = 1; x < 6; ++x) EXPECT_EQ(t.at(ch, y, x), t.at(ch, 3, 3));
  }
}

TEST(Heads, RejectsWrongChannelCount) {
  Rng rng(5);
  Heads h(6, rng);
  EXPECT_THROW(h.forward(c(Tensor::zeros({5, 7, 7}))), DimensionError);
}

TEST(Targets, LabelsCellsInsideTheBox) {
  const GridGeometry g = small_grid();
  const GroundTruthTargets t = make_targets(BoundingBox{15.5, 15.5, 9, 9}, g);
  // Cell centers lie at 3.5 + 4j; the box spans (11, 20).
  for (std::int64_t i = 0; i < 7; ++i)
    for (std::int64_t j = 0; j < 7; ++j) {
      const bool inside = i >= 2 && i <= 4 && j >= 2 && j <= 4;
      EXPECT_EQ(t.cls1.at(i, j), inside ? 1.0 : 0.0) << i << "," << j;
      EXPECT_EQ(t.mask.at(i, j), t.cls1.at(i, j));
      EXPECT_GE(t.cls2.at(i, j), 0.0);
      EXPECT_LE(t.cls2.at(i, j), 1.0);
    }
  EXPECT_DOUBLE_EQ(t.cls2.at(3, 3), 1.0);
  EXPECT_NEAR(t.cls2.at(2, 2), 0.5 / 8.5, 1e-12);
}

TEST(Targets, CenteredCellHasFullQuality) {
  const GridGeometry g = small_grid();
  const GroundTruthTargets t = make_targets(BoundingBox{g.cell_x(3), g.cell_y(2), 6, 10}, g);
  EXPECT_DOUBLE_EQ(t.cls2.at(2, 3), 1.0);
}

TEST(Targets, RejectsDegenerateBoxes) {
  EXPECT_THROW(make_targets(BoundingBox{10, 10, 0, 5}, small_grid()), InvalidTarget);
  EXPECT_THROW(make_targets(BoundingBox{10, 10, 5, -1}, small_grid()), InvalidTarget);
  GroundTruthTargets bad = one_cell_target({0, 0, 2, 2}, 0.5);
  EXPECT_THROW(bad.validate(), InvalidTarget);
  EXPECT_THROW(one_cell_target({0, 0, 2, 2}, 1.0, 1.0, 1.5).validate(), InvalidTarget);
}

TEST(CenterLoss, ZeroAtTheTargetCenter) {
  EXPECT_EQ(center_distance_loss(one_cell(7, 9, 3, 3), one_cell_target({7, 9, 4, 5})).item(), 0.0);
}

TEST(CenterLoss, SingleCellOffsetByTheWidth) {
  EXPECT_NEAR(center_distance_loss(one_cell(4, 0, 1, 1), one_cell_target({0, 0, 4, 4})).item(), 2.0, 1e-12);
}

TEST(CenterLoss, EmptyMaskGivesZero) {
  EXPECT_EQ(center_distance_loss(one_cell(40, 0, 1, 1), one_cell_target({0, 0, 4, 4}, 0.0)).item(), 0.0);
}

TEST(CenterLoss, TranslationCovariant) {
  Rng rng(6);
  const GridGeometry g = small_grid();
  const Tensor loc = random_normal({4, 7, 7}, rng, 0.5);
  const GroundTruthTargets t = make_targets(BoundingBox{14, 17, 12, 9}, g);
  DecodedBoxes d = decode_boxes(c(loc), g);
  const double base = center_distance_loss(d, t).item();
  d.cx = ad::add_scalar(d.cx, 3.25);
  d.cy = ad::add_scalar(d.cy, -7.5);
  GroundTruthTargets moved = t;
  moved.box.cx += 3.25;
  moved.box.cy -= 7.5;
  EXPECT_NEAR(center_distance_loss(d, moved).item(), base, 1e-12);
}

TEST(IouLoss, PerfectOverlapGivesZero) {
  EXPECT_NEAR(iou_loss(one_cell(3, 4, 5, 6), one_cell_target({3, 4, 5, 6})).item(), 0.0, 1e-15);
}

TEST(IouLoss, UnitShiftOfTwoByTwoBoxes) {
  EXPECT_NEAR(iou_loss(one_cell(0, 0, 2, 2), one_cell_target({1, 1, 2, 2})).item(), 6.0 / 7.0, 1e-12);
}

TEST(IouLoss, DisjointBoxesGiveOne) {
  EXPECT_NEAR(iou_loss(one_cell(0, 0, 2, 2), one_cell_target({10, 10, 2, 2})).item(), 1.0, 1e-15);
}

TEST(IouLoss, MatchesPixelCountingOnIntegerBoxes) {
  Rng rng(7);
  std::uniform_int_distribution<int> pos(0, 20), size(1, 20);
  for (int i = 0; i < 200; ++i) {
    const oracle::PixelBox a{pos(rng), pos(rng), size(rng), size(rng)}, b{pos(rng), pos(rng), size(rng), size(rng)};
    const BoundingBox pa = a.center(), pb = b.center();
    const double got = iou_map(one_cell(pa.cx, pa.cy, pa.w, pa.h), pb).item();
    const double area = std::min(a.w * a.h, b.w * b.h);
    EXPECT_LE(std::abs(got - oracle::pixel_iou(a, b)), 2.0 / area);
  }
}

TEST(IouLoss, CollapsedPredictionIsClampedNotNaN) {
  const GridGeometry g = small_grid();
  Tensor loc({4, 7, 7});
  for (std::int64_t i = 0; i < 7; ++i)
    for (std::int64_t j = 0; j < 7; ++j) loc.at(2, i, j) = -200.0;
  const DecodedBoxes d = decode_boxes(c(loc), g);
  EXPECT_DOUBLE_EQ(d.w.value().at(0, 0), kMinBoxSide);
  const double l = loss_loc2(c(loc), make_targets(BoundingBox{15, 15, 10, 10}, g), g).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 1.0, 1e-4);
}

TEST(ClassLoss, ConfidentCorrectLogitsGiveNearZeroCrossEntropy) {
  const double gap = std::log((1.0 - 1e-7) / 1e-7);
  Tensor logits({2, 1, 1});
  logits.at(1, 0, 0) = gap;
  const auto [ce, bce] = loss_cls(c(logits), c(Tensor::zeros({1, 1, 1})), one_cell_target({0, 0, 2, 2}));
  EXPECT_LT(ce.item(), 1e-6);
  EXPECT_GE(ce.item(), 0.0);
}

TEST(ClassLoss, UniformLogitsGiveLogTwo) {
  const GroundTruthTargets t = make_targets(BoundingBox{15, 15, 10, 10}, small_grid());
  const auto [ce, bce] = loss_cls(c(Tensor::zeros({2, 7, 7})), c(Tensor::zeros({1, 7, 7})), t);
  EXPECT_NEAR(ce.item(), std::log(2.0), 1e-12);
}

TEST(ClassLoss, HalfLabelsWithHalfPredictionGiveLogTwo) {
  const auto [ce, bce] =
      loss_cls(c(Tensor::zeros({2, 1, 1})), c(Tensor::zeros({1, 1, 1})), one_cell_target({0, 0, 2, 2}, 1.0, 1.0, 0.5));
  EXPECT_NEAR(bce.item(), std::log(2.0), 1e-12);
}

TEST(ClassLoss, RejectsShapeMismatchAndNonFiniteLogits) {
  const GroundTruthTargets t = make_targets(BoundingBox{15, 15, 10, 10}, small_grid());
  EXPECT_THROW(loss_cls(c(Tensor::zeros({2, 6, 6})), c(Tensor::zeros({1, 7, 7})), t), DimensionError);
  Tensor bad({2, 7, 7});
  bad[3] = std::nan("");
  EXPECT_THROW(loss_cls(c(bad), c(Tensor::zeros({1, 7, 7})), t), NumericError);
}

TEST(TotalLoss, SumsTheFourParts) {
  auto s = [](double v) { return c(Tensor({1}, v)); };
  EXPECT_DOUBLE_EQ(total_loss({s(1), s(2), s(3), s(4)}).item(), 10.0);
  EXPECT_DOUBLE_EQ(total_loss({s(0), s(0), s(0), s(0)}).item(), 0.0);
}

TEST(TotalLoss, AllPartsNonNegativeAndFiniteOnRandomOutputs) {
  Rng rng(8);
  const GridGeometry g = small_grid();
  for (int trial = 0; trial < 20; ++trial) {
    const HeadOutputs out{c(random_normal({2, 7, 7}, rng, 3.0)), c(random_normal({1, 7, 7}, rng, 3.0)),
                          c(random_normal({4, 7, 7}, rng, 1.0))};
    std::uniform_real_distribution<double> u(5.0, 25.0), s(3.0, 15.0);
    const LossParts p = compute_losses(out, make_targets(BoundingBox{u(rng), u(rng), s(rng), s(rng)}, g), g);
    for (const Var* v : {&p.cls1, &p.cls2, &p.loc1, &p.loc2}) {
      EXPECT_TRUE(std::isfinite(v->item()));
      EXPECT_GE(v->item(), 0.0);
    }
    EXPECT_LE(p.loc2.item(), 1.0);
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  for (const GradCheckResult& r : gradcheck_losses(44)) EXPECT_TRUE(r.passed) << r.name << " " << r.worst << " rel err " << r.max_rel_error;
}
