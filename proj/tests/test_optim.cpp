#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "tprop/optim.hpp"

using namespace tprop;

TEST(Sgd, SingleStep) {
  OptimizerState st;
  std::vector<double> theta{1.0};
  const std::vector<double> g{2.0};
  step(OptimizerConfig{OptimizerKind::sgd, 0.1, 0.9, 1e-8}, st, theta, g);
  EXPECT_DOUBLE_EQ(theta[0], 0.8);
  EXPECT_TRUE(st.accum.empty());
}

TEST(RmsProp, FirstStepFromZeroAccumulator) {
  OptimizerState st;
  std::vector<double> theta{0.0};
  const std::vector<double> g{1.0};
  step(OptimizerConfig{OptimizerKind::rmsprop, 1e-3, 0.9, 1e-8}, st, theta, g);
  EXPECT_NEAR(st.accum[0], 0.1, 1e-15);
  EXPECT_NEAR(theta[0], -0.00316227, 1e-8);
}

TEST(RmsProp, ZeroGradientDecaysAccumulatorOnly) {
  const OptimizerConfig cfg{OptimizerKind::rmsprop, 1e-3, 0.9, 1e-8};
  OptimizerState st;
  std::vector<double> theta{0.5, -0.5};
  step(cfg, st, theta, std::vector<double>{1.0, -2.0});
  const std::vector<double> after = theta;
  const std::vector<double> r = st.accum;
  step(cfg, st, theta, std::vector<double>{0.0, 0.0});
  EXPECT_EQ(theta, after);
  EXPECT_DOUBLE_EQ(st.accum[0], 0.9 * r[0]);
  EXPECT_DOUBLE_EQ(st.accum[1], 0.9 * r[1]);
}

TEST(RmsProp, AccumulatorsStayNonnegative) {
  Rng rng(71);
  const OptimizerConfig cfg{OptimizerKind::rmsprop, 1e-2, 0.95, 1e-8};
  OptimizerState st;
  std::vector<double> theta(20, 0.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> g(20);
    for (double& v : g) v = rng.normal() * std::exp(4.0 * rng.normal());
    step(cfg, st, theta, g);
    for (double r : st.accum) ASSERT_GE(r, 0.0);
  }
}

TEST(RmsProp, NoDecayStepIsSignTimesRate) {
  Rng rng(72);
  const OptimizerConfig cfg{OptimizerKind::rmsprop, 0.01, 0.0, 1e-300};
  for (int t = 0; t < 100; ++t) {
    OptimizerState st;
    std::vector<double> theta(8, 0.0), g(8);
    for (double& v : g) v = rng.normal();
    step(cfg, st, theta, g);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(theta[i], -0.01 * (g[i] > 0 ? 1.0 : -1.0), 1e-15);
  }
}

TEST(Step, ShapeMismatch) {
  const OptimizerConfig cfg;
  OptimizerState st;
  Matrix p(2, 2);
  EXPECT_THROW(step(cfg, st, p, Matrix(2, 3)), DimensionError);
  std::vector<double> a(3);
  EXPECT_THROW(step(cfg, st, a, std::vector<double>(2)), DimensionError);
}

TEST(Step, StateMustMatchParameter) {
  const OptimizerConfig cfg;
  OptimizerState st;
  std::vector<double> a(3), b(4);
  step(cfg, st, a, std::vector<double>(3, 1.0));
  EXPECT_THROW(step(cfg, st, b, std::vector<double>(4, 1.0)), DimensionError);
}

TEST(OptimizerConfig, Validation) {
  EXPECT_THROW((OptimizerConfig{OptimizerKind::rmsprop, 0.0, 0.9, 1e-8}.validate()), ConfigError);
  EXPECT_THROW((OptimizerConfig{OptimizerKind::rmsprop, 1e-3, 1.0, 1e-8}.validate()), ConfigError);
  EXPECT_THROW((OptimizerConfig{OptimizerKind::rmsprop, 1e-3, 0.9, 0.0}.validate()), ConfigError);
  EXPECT_NO_THROW((OptimizerConfig{}.validate()));
  const OptimizerConfig d;
  EXPECT_EQ(d.lr, 1e-3);
  EXPECT_EQ(d.rho, 0.9);
  EXPECT_EQ(d.eps, 1e-8);
}
