#pragma once

#include <span>
#include <string>
#include <vector>

#include "tprop/errors.hpp"
#include "tprop/layers.hpp"
#include "tprop/linalg.hpp"
#include "tprop/rng.hpp"
#include "tprop/tpengine.hpp"

namespace tprop {

/// Everything a forward sweep produces. Index 0 holds the input; index i
/// (1..M) holds layer i's wire value and real-valued activation.
struct ForwardCache {
  std::vector<Matrix> wires;
  std::vector<Matrix> acts;

  std::size_t depth() const noexcept { return wires.empty() ? 0 : wires.size() - 1; }
  const Matrix& output() const { return acts.back(); }
};

inline ForwardCache forward_pass(std::span<const ForwardLayer> layers, const Matrix& x, Rng* rng = nullptr) {
  ForwardCache cache;
  cache.wires.reserve(layers.size() + 1);
  cache.acts.reserve(layers.size() + 1);
  cache.wires.push_back(x);
  cache.acts.push_back(x);
  for (const ForwardLayer& layer : layers) {
    LayerOutput o = forward(layer, cache.wires.back(), rng);
    cache.wires.push_back(std::move(o.output));
    cache.acts.push_back(std::move(o.activation));
  }
  return cache;
}

struct LayerGrads {
  Matrix weight;
  Vector bias;
};

/// Per-layer gradients of the batch-mean global loss.
struct BackpropGrads {
  double loss = 0.0;
  std::vector<LayerGrads> layers;
};

namespace detail {

// Chain rule from the global loss down to layer `first_trained` (0-based).
// Layers below it get zero gradients. Crossing a discretized or stochastic
// wire is only allowed with the straight-through rule, which treats the
// sign / sampling step as the identity.
inline BackpropGrads backprop_core(std::span<const ForwardLayer> layers, const ForwardCache& cache, const Matrix& y,
                                   LossKind kind, bool straight_through, std::size_t first_trained) {
  const std::size_t depth = layers.size();
  if (depth == 0) throw ConfigError("backprop: empty network");
  BackpropGrads out;
  out.loss = global_loss(kind, cache.output(), y);
  out.layers.resize(depth);
  for (std::size_t i = 0; i < depth; ++i) {
    out.layers[i].weight = Matrix(layers[i].W.rows(), layers[i].W.cols());
    out.layers[i].bias = Vector(layers[i].b.size());
  }
  if (first_trained >= depth) return out;

  const double inv_batch = 1.0 / static_cast<double>(std::max<std::size_t>(y.cols(), 1));
  Matrix delta = output_delta(kind, layers[depth - 1].act, cache.output(), y);
  for (std::size_t i = depth; i-- > first_trained;) {
    Matrix scaled = delta * inv_batch;
    out.layers[i].weight = matmul_nt(scaled, cache.wires[i]);
    out.layers[i].bias = row_sums(scaled);
    if (i == first_trained) break;

    const ForwardLayer& below = layers[i - 1];
    if (below.transmit != Transmit::real && !straight_through) {
      throw UnsupportedError("backprop: layer " + std::to_string(i) + " transmits " +
                             std::string(to_string(below.transmit)) +
                             " values; the true derivative is zero almost everywhere (use straight-through)");
    }
    Matrix d_act = matmul_tn(layers[i].W, delta);
    if (below.act == Activation::sign) {
      if (!straight_through) throw UnsupportedError("backprop: sign activation requires the straight-through rule");
      delta = std::move(d_act);
    } else {
      delta = hadamard(d_act, activation_deriv(below.act, cache.acts[i]));
    }
  }
  return out;
}

}  // namespace detail

/// Exact gradients of the global loss. Fails on networks with discrete or
/// stochastic transmissions.
inline BackpropGrads backprop(std::span<const ForwardLayer> layers, const Matrix& x, const Matrix& y, LossKind kind) {
  const ForwardCache cache = forward_pass(layers, x, nullptr);
  return detail::backprop_core(layers, cache, y, kind, false, 0);
}

inline BackpropGrads backprop(std::span<const ForwardLayer> layers, const ForwardCache& cache, const Matrix& y,
                              LossKind kind) {
  return detail::backprop_core(layers, cache, y, kind, false, 0);
}

/// Back-propagation where sign and Bernoulli sampling steps pass gradients
/// through unchanged (the straight-through estimator). On a network without
/// such steps this is plain backprop.
inline BackpropGrads straight_through_backprop(std::span<const ForwardLayer> layers, const ForwardCache& cache,
                                               const Matrix& y, LossKind kind) {
  return detail::backprop_core(layers, cache, y, kind, true, 0);
}

inline BackpropGrads straight_through_backprop(std::span<const ForwardLayer> layers, const Matrix& x,
                                               const Matrix& y, LossKind kind, Rng* rng = nullptr) {
  const ForwardCache cache = forward_pass(layers, x, rng);
  return detail::backprop_core(layers, cache, y, kind, true, 0);
}

/// Backprop on layers freeze_below..M only (1-based); the layers below get
/// zero weight and bias gradients. freeze_below = M + 1 freezes everything
/// and only reports the loss.
inline BackpropGrads frozen_lower_backprop(std::span<const ForwardLayer> layers, std::size_t freeze_below,
                                           const ForwardCache& cache, const Matrix& y, LossKind kind) {
  if (freeze_below < 1 || freeze_below > layers.size() + 1) {
    throw ParameterError("frozen_lower_backprop: freeze_below must lie in [1, " + std::to_string(layers.size() + 1) +
                         "], got " + std::to_string(freeze_below));
  }
  return detail::backprop_core(layers, cache, y, kind, false, freeze_below - 1);
}

inline BackpropGrads frozen_lower_backprop(std::span<const ForwardLayer> layers, std::size_t freeze_below,
                                           const Matrix& x, const Matrix& y, LossKind kind, Rng* rng = nullptr) {
  const ForwardCache cache = forward_pass(layers, x, rng);
  return frozen_lower_backprop(layers, freeze_below, cache, y, kind);
}

}  // namespace tprop
