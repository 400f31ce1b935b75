#include <gtest/gtest.h>

#include "tctrack/gradcheck.hpp"
#include "tctrack/selftest.hpp"

using namespace tctrack;

TEST(GradCheck, AllSuitesPass) {
  const auto results = run_gradcheck_suites(0);
  EXPECT_EQ(results.size(), 7u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.name << " " << r.worst << " rel err " << r.max_rel_error;
    EXPECT_GT(r.checked, 0u) << r.name;
    EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
  }
}

TEST(GradCheck, FlagsAWrongGradient) {
  Rng rng(1);
  const Var x = ad::leaf(random_normal({5}, rng));
  // d/dx sum(x * stop_gradient(x)) is x, half the true derivative.
  const GradCheckResult r = check_gradients("broken", [&] { return ad::sum(ad::mul(x, x.detach())); }, {{"x", x}});
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(GradCheck, RequiresAScalarObjective) {
  Rng rng(2);
  const Var x = ad::leaf(random_normal({3}, rng));
  EXPECT_THROW(check_gradients("vector", [&] { return ad::scale(x, 2.0); }, {{"x", x}}), DimensionError);
}

TEST(Selftest, EveryFixturePasses) {
  for (const auto& row : run_selftest(0)) EXPECT_TRUE(row.passed) << row.name << " error " << row.error;
}
