#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "tprop/baselines.hpp"
#include "tprop/models.hpp"

using namespace tprop;

namespace {

ForwardLayer layer(std::size_t in, std::size_t out, Activation act, Transmit tr, Rng& rng) {
  return ForwardLayer{gaussian_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng),
                      gaussian_noise(out, 0.2, rng), act, tr};
}

Matrix one_hot(std::size_t classes, std::size_t batch, Rng& rng) {
  Matrix y(classes, batch);
  for (std::size_t c = 0; c < batch; ++c) y(rng.uniform_index(classes), c) = 1.0;
  return y;
}

}  // namespace

TEST(Backprop, SingleLinearLayerIsDeltaRule) {
  Rng rng(81);
  const std::vector<ForwardLayer> net = {layer(4, 3, Activation::identity, Transmit::real, rng)};
  const Matrix x = gaussian_matrix(4, 1, 1.0, rng), y = gaussian_matrix(3, 1, 1.0, rng);
  const BackpropGrads g = backprop(net, x, y, LossKind::mse);
  const Matrix h = forward(net[0], x).output;
  const Matrix expected = oracle::naive_matmul((h - y) * 2.0, oracle::naive_transpose(x));
  EXPECT_LT(oracle::max_abs_diff(g.layers[0].weight.data(), expected.data()), 1e-14);
}

TEST(Backprop, ThreeLayerTanhNetMatchesFiniteDifferences) {
  Rng rng(82);
  for (int t = 0; t < 100; ++t) {
    const bool ce = t % 2 == 0;
    const std::size_t d0 = oracle::dim(rng, 1, 5), d1 = oracle::dim(rng, 1, 5), d2 = oracle::dim(rng, 1, 5),
                      d3 = oracle::dim(rng, 2, 4), batch = oracle::dim(rng, 1, 3);
    std::vector<ForwardLayer> net = {layer(d0, d1, Activation::tanh, Transmit::real, rng),
                                     layer(d1, d2, Activation::tanh, Transmit::real, rng),
                                     layer(d2, d3, ce ? Activation::softmax : Activation::identity, Transmit::real, rng)};
    const Matrix x = gaussian_matrix(d0, batch, 1.0, rng);
    const Matrix y = ce ? one_hot(d3, batch, rng) : gaussian_matrix(d3, batch, 1.0, rng);
    const LossKind kind = ce ? LossKind::cross_entropy : LossKind::mse;
    const BackpropGrads g = backprop(net, x, y, kind);
    auto loss = [&] { return global_loss(kind, forward_pass(net, x).output(), y); };
    for (std::size_t i = 0; i < net.size(); ++i) {
      EXPECT_LT(oracle::rel_err(g.layers[i].weight.data(), oracle::fd_gradient(net[i].W.data(), loss)), 1e-5);
      EXPECT_LT(oracle::rel_err(g.layers[i].bias.data(), oracle::fd_gradient(net[i].b.data(), loss)), 1e-5);
    }
  }
}

TEST(Backprop, ZeroLossPointHasZeroGradients) {
  Rng rng(83);
  const std::vector<ForwardLayer> net = {layer(3, 4, Activation::tanh, Transmit::real, rng),
                                         layer(4, 2, Activation::identity, Transmit::real, rng)};
  const Matrix x = gaussian_matrix(3, 5, 1.0, rng);
  const Matrix y = forward_pass(net, x).output();
  const BackpropGrads g = backprop(net, x, y, LossKind::mse);
  EXPECT_EQ(g.loss, 0.0);
  for (const auto& l : g.layers) {
    for (double v : l.weight.data()) EXPECT_EQ(v, 0.0);
    for (double v : l.bias) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backprop, RefusesDiscreteWires) {
  Rng rng(84);
  const std::vector<ForwardLayer> net = {layer(3, 4, Activation::tanh, Transmit::discretized, rng),
                                         layer(4, 2, Activation::softmax, Transmit::real, rng)};
  EXPECT_THROW((void)backprop(net, gaussian_matrix(3, 2, 1.0, rng), one_hot(2, 2, rng), LossKind::cross_entropy),
               UnsupportedError);
}

TEST(StraightThrough, EqualsBackpropWithoutDiscreteSteps) {
  Rng rng(85);
  for (int t = 0; t < 20; ++t) {
    const std::vector<ForwardLayer> net = {layer(5, 4, Activation::tanh, Transmit::real, rng),
                                           layer(4, 3, Activation::softmax, Transmit::real, rng)};
    const Matrix x = gaussian_matrix(5, 3, 1.0, rng), y = one_hot(3, 3, rng);
    const BackpropGrads a = backprop(net, x, y, LossKind::cross_entropy);
    const BackpropGrads b = straight_through_backprop(net, x, y, LossKind::cross_entropy);
    for (std::size_t i = 0; i < net.size(); ++i) {
      EXPECT_EQ(a.layers[i].weight, b.layers[i].weight);
      EXPECT_EQ(a.layers[i].bias, b.layers[i].bias);
    }
  }
}

TEST(StraightThrough, DiscreteLowerLayerGetsNonzeroGradient) {
  Rng rng(86);
  const std::vector<ForwardLayer> net = {layer(6, 5, Activation::tanh, Transmit::discretized, rng),
                                         layer(5, 3, Activation::softmax, Transmit::real, rng)};
  const Matrix x = gaussian_matrix(6, 4, 1.0, rng), y = one_hot(3, 4, rng);
  const BackpropGrads g = straight_through_backprop(net, x, y, LossKind::cross_entropy);
  EXPECT_GT(frobenius_norm(g.layers[0].weight), 0.0);
}

TEST(StraightThrough, DiscreteWireGradientTreatsSignAsIdentity) {
  // h1 = tanh(W1 x) sent as sign(h1); top = softmax(W2 sign(h1)). With the
  // straight-through rule dL/dh1 = W2^T (p - y), so dL/dW1 = (W2^T (p - y)) . (1 - h1^2) x^T.
  Rng rng(87);
  const std::vector<ForwardLayer> net = {layer(3, 2, Activation::tanh, Transmit::discretized, rng),
                                         layer(2, 2, Activation::softmax, Transmit::real, rng)};
  const Matrix x = gaussian_matrix(3, 1, 1.0, rng);
  const Matrix y{{0.0}, {1.0}};
  const ForwardCache cache = forward_pass(net, x);
  const BackpropGrads g = straight_through_backprop(net, cache, y, LossKind::cross_entropy);
  const Matrix& h1 = cache.acts[1];
  const Matrix& p = cache.acts[2];
  for (std::size_t r = 0; r < 2; ++r) {
    double back = 0.0;
    for (std::size_t k = 0; k < 2; ++k) back += net[1].W(k, r) * (p(k, 0) - y(k, 0));
    const double delta = back * (1.0 - h1(r, 0) * h1(r, 0));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(g.layers[0].weight(r, c), delta * x(c, 0), 1e-14);
  }
}

TEST(StraightThrough, StochasticTwoUnitHandExample) {
  // Two stochastic sigmoid units feed a softmax. The estimator's lower-layer
  // signal is sigma'(W1 x) . W2^T delta_2 computed from probabilities.
  const ForwardLayer l1{Matrix{{0.5, -1.0}, {1.5, 0.25}}, Vector{0.1, -0.2}, Activation::sigmoid,
                        Transmit::stochastic_binary};
  const ForwardLayer l2{Matrix{{1.0, -2.0}, {0.5, 0.75}}, Vector{0.0, 0.3}, Activation::softmax, Transmit::real};
  const std::vector<ForwardLayer> net = {l1, l2};
  const Matrix x{{1.0}, {2.0}};
  const Matrix y{{1.0}, {0.0}};
  Rng rng(88);
  const ForwardCache cache = forward_pass(net, x, &rng);
  const BackpropGrads g = straight_through_backprop(net, cache, y, LossKind::cross_entropy);

  const double u0 = 0.5 * 1.0 - 1.0 * 2.0 + 0.1, u1 = 1.5 * 1.0 + 0.25 * 2.0 - 0.2;
  const double p0 = 1.0 / (1.0 + std::exp(-u0)), p1 = 1.0 / (1.0 + std::exp(-u1));
  const double s0 = cache.wires[1](0, 0), s1 = cache.wires[1](1, 0);  // sampled bits
  const double z0 = 1.0 * s0 - 2.0 * s1, z1 = 0.5 * s0 + 0.75 * s1 + 0.3;
  const double q0 = std::exp(z0) / (std::exp(z0) + std::exp(z1)), q1 = 1.0 - q0;
  const double d0 = q0 - 1.0, d1 = q1;
  const double back0 = (1.0 * d0 + 0.5 * d1) * p0 * (1.0 - p0);
  const double back1 = (-2.0 * d0 + 0.75 * d1) * p1 * (1.0 - p1);
  EXPECT_NEAR(g.layers[0].weight(0, 0), back0 * 1.0, 1e-14);
  EXPECT_NEAR(g.layers[0].weight(0, 1), back0 * 2.0, 1e-14);
  EXPECT_NEAR(g.layers[0].weight(1, 0), back1 * 1.0, 1e-14);
  EXPECT_NEAR(g.layers[0].weight(1, 1), back1 * 2.0, 1e-14);
  EXPECT_NEAR(g.layers[1].weight(0, 0), d0 * s0, 1e-14);
  EXPECT_NEAR(g.layers[1].weight(1, 1), d1 * s1, 1e-14);
}

TEST(FrozenLower, FreezeBelowOneEqualsBackprop) {
  Rng rng(89);
  const std::vector<ForwardLayer> net = {layer(4, 3, Activation::tanh, Transmit::real, rng),
                                         layer(3, 3, Activation::softmax, Transmit::real, rng)};
  const Matrix x = gaussian_matrix(4, 2, 1.0, rng), y = one_hot(3, 2, rng);
  const BackpropGrads a = backprop(net, x, y, LossKind::cross_entropy);
  const BackpropGrads b = frozen_lower_backprop(net, 1, x, y, LossKind::cross_entropy);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.layers[i].weight, b.layers[i].weight);
}

TEST(FrozenLower, FreezingEverythingReportsLossOnly) {
  Rng rng(90);
  const std::vector<ForwardLayer> net = {layer(4, 3, Activation::tanh, Transmit::real, rng),
                                         layer(3, 3, Activation::softmax, Transmit::real, rng)};
  const Matrix x = gaussian_matrix(4, 2, 1.0, rng), y = one_hot(3, 2, rng);
  const BackpropGrads g = frozen_lower_backprop(net, 3, x, y, LossKind::cross_entropy);
  EXPECT_GT(g.loss, 0.0);
  for (const auto& l : g.layers) EXPECT_EQ(frobenius_norm(l.weight), 0.0);
  EXPECT_THROW((void)frozen_lower_backprop(net, 0, x, y, LossKind::cross_entropy), ParameterError);
  EXPECT_THROW((void)frozen_lower_backprop(net, 4, x, y, LossKind::cross_entropy), ParameterError);
}

TEST(FrozenLower, DiscreteNetUpperGradientsMatchTruncatedNet) {
  Rng rng(91);
  const NetworkParams full = build_discrete_net(rng, 12, 8, 4);
  const Matrix x = gaussian_matrix(12, 5, 1.0, rng), y = one_hot(4, 5, rng);
  const ForwardCache cache = forward_pass(full.forward, x);
  const BackpropGrads g = frozen_lower_backprop(full.forward, 2, cache, y, LossKind::cross_entropy);
  EXPECT_EQ(frobenius_norm(g.layers[0].weight), 0.0);
  EXPECT_EQ(norm(g.layers[0].bias), 0.0);
  // Truncated oracle: layers 2..3 fed with the binary wire of layer 1.
  const std::vector<ForwardLayer> upper = {full.forward[1], full.forward[2]};
  const BackpropGrads t = backprop(upper, cache.wires[1], y, LossKind::cross_entropy);
  EXPECT_EQ(g.layers[1].weight, t.layers[0].weight);
  EXPECT_EQ(g.layers[2].weight, t.layers[1].weight);
  EXPECT_EQ(g.layers[2].bias, t.layers[1].bias);
}

TEST(FrozenLower, TrainingNeverTouchesFrozenParameters) {
  Rng rng(92);
  NetworkParams net = build_discrete_net(rng, 12, 8, 4);
  const Matrix W1 = net.forward[0].W;
  const Vector b1 = net.forward[0].b;
  NetworkOptimizer opt = NetworkOptimizer::make(net, OptimizerConfig{}, OptimizerConfig{});
  for (int t = 0; t < 50; ++t) {
    const Matrix x = gaussian_matrix(12, 6, 1.0, rng), y = one_hot(4, 6, rng);
    gradient_train_step(net, x, y, LossKind::cross_entropy, GradientMethod::frozen_lower, 2, opt, rng);
  }
  EXPECT_EQ(net.forward[0].W, W1);
  EXPECT_EQ(net.forward[0].b, b1);
  EXPECT_TRUE(opt.forward_state[0].weight.accum.empty());
}
