#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "tprop/baselines.hpp"
#include "tprop/errors.hpp"
#include "tprop/layers.hpp"
#include "tprop/linalg.hpp"
#include "tprop/optim.hpp"
#include "tprop/rng.hpp"
#include "tprop/tpengine.hpp"

namespace tprop {

/// Forward mappings f_1..f_M and feedback mappings g_2..g_{M-1}.
/// inverse[k] is g_{k+2}: it maps layer k+2's activation back onto layer k+1.
struct NetworkParams {
  std::vector<ForwardLayer> forward;
  std::vector<InverseLayer> inverse;

  std::size_t depth() const noexcept { return forward.size(); }

  /// g_i for 2 <= i <= M-1.
  const InverseLayer& g(std::size_t i) const { return inverse.at(i - 2); }
  InverseLayer& g(std::size_t i) { return inverse.at(i - 2); }
  const ForwardLayer& f(std::size_t i) const { return forward.at(i - 1); }
  ForwardLayer& f(std::size_t i) { return forward.at(i - 1); }

  bool stochastic() const noexcept {
    return std::any_of(forward.begin(), forward.end(),
                       [](const ForwardLayer& l) { return l.transmit == Transmit::stochastic_binary; });
  }

  std::size_t forward_parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : forward) n += l.W.size() + l.b.size();
    return n;
  }

  void validate() const {
    if (forward.empty()) throw ConfigError("NetworkParams: no layers");
    for (std::size_t i = 0; i < forward.size(); ++i) {
      forward[i].validate();
      if (i > 0 && forward[i].in() != forward[i - 1].out()) {
        throw DimensionError("NetworkParams: layer " + std::to_string(i + 1) + " expects " +
                             std::to_string(forward[i].in()) + " inputs but layer " + std::to_string(i) +
                             " emits " + std::to_string(forward[i - 1].out()));
      }
    }
    const std::size_t expected = forward.size() >= 2 ? forward.size() - 2 : 0;
    if (inverse.size() != expected) {
      throw ConfigError("NetworkParams: expected " + std::to_string(expected) + " inverse layers, got " +
                        std::to_string(inverse.size()));
    }
    for (std::size_t i = 2; i + 1 <= forward.size(); ++i) {
      const InverseLayer& gi = g(i);
      gi.validate();
      if (gi.in() != f(i).out() || gi.out() != f(i).in()) {
        throw DimensionError("NetworkParams: g_" + std::to_string(i) + " shape " + gi.V.shape() +
                             " does not mirror f_" + std::to_string(i) + " " + f(i).W.shape());
      }
    }
  }
};

/// Denoising auto-encoder with tied weights: encoder sig(W x + b), decoder
/// sig(W^T h + c). Only W is stored, so the decoder weight is always W^T.
struct AutoEncoderParams {
  Matrix W;  // hidden x visible
  Vector b;  // hidden
  Vector c;  // visible

  std::size_t visible() const noexcept { return W.cols(); }
  std::size_t hidden() const noexcept { return W.rows(); }

  void validate() const {
    if (b.size() != W.rows() || c.size() != W.cols()) {
      throw DimensionError("AutoEncoderParams: biases do not match W " + W.shape());
    }
  }
};

// ---------------------------------------------------------------------------
// Builders

inline ForwardLayer make_forward_layer(std::size_t in, std::size_t out, Activation act, Transmit transmit, Rng& rng,
                                       double gain = 1.0) {
  ForwardLayer l{orthogonal_init(out, in, gain, rng), Vector(out), act, transmit};
  l.validate();
  return l;
}

inline InverseLayer make_inverse_layer(const ForwardLayer& f, Activation act, Rng& rng, double gain = 1.0,
                                       bool binarize_input = false) {
  return InverseLayer{orthogonal_init(f.in(), f.out(), gain, rng), Vector(f.in()), act, binarize_input};
}

/// in -> width x hidden_layers -> classes, softmax output, orthogonal init,
/// zero biases. Feedback mappings reuse the hidden activation.
inline NetworkParams build_mlp(std::size_t inputs, std::size_t hidden_layers, std::size_t width, std::size_t classes,
                               Activation act, Rng& rng, double gain = 1.0) {
  if (hidden_layers < 1 || width < 1) throw ConfigError("build_mlp: hidden_layers and width must be >= 1");
  NetworkParams net;
  std::size_t prev = inputs;
  for (std::size_t i = 0; i < hidden_layers; ++i) {
    net.forward.push_back(make_forward_layer(prev, width, act, Transmit::real, rng, gain));
    prev = width;
  }
  net.forward.push_back(make_forward_layer(prev, classes, Activation::softmax, Transmit::real, rng, gain));
  for (std::size_t i = 2; i + 1 <= net.depth(); ++i) {
    net.inverse.push_back(make_inverse_layer(net.f(i), act, rng, gain));
  }
  net.validate();
  return net;
}

inline NetworkParams build_mnist_mlp(std::size_t hidden_layers, std::size_t width, Activation act, Rng& rng,
                                     double gain = 1.0) {
  return build_mlp(784, hidden_layers, width, 10, act, rng, gain);
}

/// 784-500-500-10 with the first hidden layer's output discretized on the
/// wire: h1 = tanh(W1 x), h2 = tanh(W2 sign(h1)), p = softmax(W3 h2), and
/// feedback g2(h2) = tanh(V2 sign(h2)).
inline NetworkParams build_discrete_net(Rng& rng, std::size_t inputs = 784, std::size_t width = 500,
                                        std::size_t classes = 10, double gain = 1.0) {
  NetworkParams net;
  net.forward.push_back(make_forward_layer(inputs, width, Activation::tanh, Transmit::discretized, rng, gain));
  net.forward.push_back(make_forward_layer(width, width, Activation::tanh, Transmit::real, rng, gain));
  net.forward.push_back(make_forward_layer(width, classes, Activation::softmax, Transmit::real, rng, gain));
  net.inverse.push_back(make_inverse_layer(net.f(2), Activation::tanh, rng, gain, true));
  net.validate();
  return net;
}

/// 784-200-200-10 with stochastic binary hidden units, firing probability
/// sigmoid(W h + b); feedback g2(h2^p) = tanh(V2 h2^p).
inline NetworkParams build_stochastic_net(Rng& rng, std::size_t inputs = 784, std::size_t width = 200,
                                          std::size_t classes = 10, double gain = 1.0) {
  NetworkParams net;
  net.forward.push_back(make_forward_layer(inputs, width, Activation::sigmoid, Transmit::stochastic_binary, rng, gain));
  net.forward.push_back(make_forward_layer(width, width, Activation::sigmoid, Transmit::stochastic_binary, rng, gain));
  net.forward.push_back(make_forward_layer(width, classes, Activation::softmax, Transmit::real, rng, gain));
  net.inverse.push_back(make_inverse_layer(net.f(2), Activation::tanh, rng, gain));
  net.validate();
  return net;
}

inline AutoEncoderParams build_autoencoder(std::size_t visible, std::size_t hidden, Rng& rng, double gain = 1.0) {
  AutoEncoderParams ae{orthogonal_init(hidden, visible, gain, rng), Vector(hidden), Vector(visible)};
  ae.validate();
  return ae;
}

// ---------------------------------------------------------------------------
// Prediction

/// Output probabilities; stochastic networks average `samples` passes.
inline Matrix predict_proba(const NetworkParams& net, const Matrix& x, std::size_t samples, Rng& rng) {
  if (!net.stochastic() || samples <= 1) return forward_pass(net.forward, x, &rng).output();
  Matrix mean(net.forward.back().out(), x.cols());
  for (std::size_t s = 0; s < samples; ++s) mean += forward_pass(net.forward, x, &rng).output();
  mean *= 1.0 / static_cast<double>(samples);
  return mean;
}

/// Number of columns whose argmax differs from the label.
inline std::size_t count_errors(const Matrix& prob, std::span<const int> labels) {
  if (labels.size() != prob.cols()) throw DimensionError("count_errors: label count does not match batch");
  std::size_t errors = 0;
  for (std::size_t c = 0; c < prob.cols(); ++c) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < prob.rows(); ++r) {
      if (prob(r, c) > prob(best, c)) best = r;
    }
    if (static_cast<int>(best) != labels[c]) ++errors;
  }
  return errors;
}

// ---------------------------------------------------------------------------
// Training steps

enum class TargetRule { difference, vanilla };

struct DtpStepConfig {
  LossKind loss = LossKind::cross_entropy;
  double eta_tilde = 0.1;
  TargetRule rule = TargetRule::difference;
};

/// Optimizer configuration and state for every parameter of a network.
struct NetworkOptimizer {
  std::vector<OptimizerConfig> forward_cfg;
  std::vector<LayerOptState> forward_state;
  std::vector<OptimizerConfig> inverse_cfg;
  std::vector<LayerOptState> inverse_state;

  static NetworkOptimizer make(const NetworkParams& net, const OptimizerConfig& fwd, const OptimizerConfig& inv) {
    fwd.validate();
    inv.validate();
    NetworkOptimizer o;
    o.forward_cfg.assign(net.forward.size(), fwd);
    o.forward_state.resize(net.forward.size());
    o.inverse_cfg.assign(net.inverse.size(), inv);
    o.inverse_state.resize(net.inverse.size());
    return o;
  }
};

/// Activations h_0..h_M, their wire values, and the targets for layers
/// 1..M-1 (targets[0] is unused and left empty).
struct TargetBundle {
  ForwardCache cache;
  std::vector<Matrix> targets;

  const std::vector<Matrix>& activations() const noexcept { return cache.acts; }
};

/// Forward sweep plus target assignment: the top hidden target comes from the
/// global loss through f_M, lower targets from the feedback mappings.
inline TargetBundle compute_targets(const NetworkParams& net, const Matrix& x, const Matrix& y,
                                    const DtpStepConfig& cfg, Rng* sample_rng) {
  const std::size_t M = net.depth();
  TargetBundle tb{forward_pass(net.forward, x, sample_rng), std::vector<Matrix>(M)};
  if (M < 2) return tb;
  const auto& acts = tb.cache.acts;
  tb.targets[M - 1] = top_hidden_target(acts[M - 1], tb.cache.wires[M - 1], net.f(M), y, cfg.loss, cfg.eta_tilde);
  for (std::size_t i = M - 1; i >= 2; --i) {
    tb.targets[i - 1] = cfg.rule == TargetRule::difference
                            ? dtp_target(acts[i - 1], acts[i], tb.targets[i], net.g(i))
                            : vanilla_tp_target(net.g(i), tb.targets[i]);
  }
  return tb;
}

struct StepMetrics {
  double global_loss = 0.0;
  std::size_t errors = 0;
  std::vector<double> inverse_losses;  // g_2..g_{M-1}
  std::vector<double> local_losses;    // f_1..f_{M-1}
};

namespace detail {
inline std::size_t errors_against(const Matrix& prob, const Matrix& y_onehot) {
  std::size_t errors = 0;
  for (std::size_t c = 0; c < prob.cols(); ++c) {
    std::size_t best = 0, truth = 0;
    for (std::size_t r = 1; r < prob.rows(); ++r) {
      if (prob(r, c) > prob(best, c)) best = r;
      if (y_onehot(r, c) > y_onehot(truth, c)) truth = r;
    }
    if (best != truth) ++errors;
  }
  return errors;
}
}  // namespace detail

/// One step of difference (or vanilla) target propagation, in this order:
/// forward pass, top hidden target, lower targets, feedback-mapping updates
/// for i = M-1..2 at noise level `sigma`, then forward-mapping updates
/// (layer-local losses for i < M, the global loss for i = M).
inline StepMetrics dtp_train_step(NetworkParams& net, const Matrix& x, const Matrix& y, const DtpStepConfig& cfg,
                                  NetworkOptimizer& opt, double sigma, Rng& rng) {
  const std::size_t M = net.depth();
  Rng sample_rng = rng.split("sample").split(rng.next_u64());
  Rng noise_rng = rng.split("noise").split(rng.next_u64());

  TargetBundle tb = compute_targets(net, x, y, cfg, &sample_rng);
  const auto& acts = tb.cache.acts;
  const auto& wires = tb.cache.wires;

  StepMetrics m;
  m.global_loss = global_loss(cfg.loss, tb.cache.output(), y);
  m.errors = detail::errors_against(tb.cache.output(), y);
  if (!std::isfinite(m.global_loss)) throw NumericalError("dtp_train_step: global loss is not finite");

  for (std::size_t i = M - 1; M >= 3 && i >= 2; --i) {
    LocalGrad gr = inverse_loss_grad(net.f(i), net.g(i), acts[i - 1], sigma, noise_rng, net.f(i - 1).transmit);
    InverseLayer& g = net.g(i);
    step(opt.inverse_cfg[i - 2], opt.inverse_state[i - 2].weight, g.V, gr.grad_weight);
    step(opt.inverse_cfg[i - 2], opt.inverse_state[i - 2].bias, g.c, gr.grad_bias);
    m.inverse_losses.insert(m.inverse_losses.begin(), gr.loss);
  }

  for (std::size_t i = 1; i < M; ++i) {
    LocalGrad gr = local_forward_loss_grad(net.f(i), wires[i - 1], tb.targets[i]);
    step(opt.forward_cfg[i - 1], opt.forward_state[i - 1].weight, net.f(i).W, gr.grad_weight);
    step(opt.forward_cfg[i - 1], opt.forward_state[i - 1].bias, net.f(i).b, gr.grad_bias);
    m.local_losses.push_back(gr.loss);
  }

  ForwardLayer& top = net.f(M);
  Matrix delta = output_delta(cfg.loss, top.act, tb.cache.output(), y);
  delta *= 1.0 / static_cast<double>(std::max<std::size_t>(y.cols(), 1));
  step(opt.forward_cfg[M - 1], opt.forward_state[M - 1].weight, top.W, matmul_nt(delta, wires[M - 1]));
  step(opt.forward_cfg[M - 1], opt.forward_state[M - 1].bias, top.b, row_sums(delta));
  return m;
}

enum class GradientMethod { backprop, straight_through, frozen_lower };

/// One optimizer step of a gradient-based baseline.
inline StepMetrics gradient_train_step(NetworkParams& net, const Matrix& x, const Matrix& y, LossKind loss,
                                       GradientMethod method, std::size_t freeze_below, NetworkOptimizer& opt,
                                       Rng& rng) {
  Rng sample_rng = rng.split("sample").split(rng.next_u64());
  const ForwardCache cache = forward_pass(net.forward, x, &sample_rng);
  BackpropGrads grads;
  switch (method) {
    case GradientMethod::backprop: grads = backprop(net.forward, cache, y, loss); break;
    case GradientMethod::straight_through: grads = straight_through_backprop(net.forward, cache, y, loss); break;
    case GradientMethod::frozen_lower: grads = frozen_lower_backprop(net.forward, freeze_below, cache, y, loss); break;
  }
  if (!std::isfinite(grads.loss)) throw NumericalError("gradient_train_step: global loss is not finite");
  const std::size_t first = method == GradientMethod::frozen_lower ? freeze_below - 1 : 0;
  for (std::size_t i = first; i < net.depth(); ++i) {
    step(opt.forward_cfg[i], opt.forward_state[i].weight, net.forward[i].W, grads.layers[i].weight);
    step(opt.forward_cfg[i], opt.forward_state[i].bias, net.forward[i].b, grads.layers[i].bias);
  }
  StepMetrics m;
  m.global_loss = grads.loss;
  m.errors = detail::errors_against(cache.output(), y);
  return m;
}

// ---------------------------------------------------------------------------
// Auto-encoder

inline Matrix encode(const AutoEncoderParams& ae, const Matrix& x) {
  return activate(Activation::sigmoid, affine(ae.W, ae.b, x));
}

inline Matrix decode(const AutoEncoderParams& ae, const Matrix& h) {
  if (h.rows() != ae.hidden()) throw DimensionError("decode: hidden batch " + h.shape() + " vs W " + ae.W.shape());
  Matrix pre = matmul_tn(ae.W, h);
  add_to_columns(pre, ae.c);
  return activate(Activation::sigmoid, pre);
}

inline Matrix reconstruct(const AutoEncoderParams& ae, const Matrix& x) { return decode(ae, encode(ae, x)); }

/// Mean squared reconstruction error per visible unit (no noise).
inline double reconstruction_mse(const AutoEncoderParams& ae, const Matrix& x) {
  const Matrix z = reconstruct(ae, x);
  return squared_norm((z - x).data()) / static_cast<double>(std::max<std::size_t>(x.size(), 1));
}

struct AutoEncoderOptimizer {
  OptimizerConfig cfg;
  OptimizerState W, b, c;
};

struct AutoEncoderMetrics {
  double decoder_loss = 0.0;  // ||g(h) - x||^2, batch mean
  double encoder_loss = 0.0;  // ||f(x + eps) - h_target||^2, batch mean
};

struct AutoEncoderGrads {
  AutoEncoderMetrics metrics;
  Matrix W_decoder;  // contribution through W^T, already in W's layout
  Vector c;
  Matrix W_encoder;
  Vector b;
};

/// Gradients of both target-propagation losses at the current parameters:
///   h = sig(W x + b), z = sig(W^T (h + eps) + c)
///   L_g = ||z - x||^2 with h constant          -> decoder (W^T, c)
///   h_target = 2h - f(z)
///   L_f = ||f(x + eps') - h_target||^2, target constant -> encoder (W, b)
inline AutoEncoderGrads autoencoder_grads(const AutoEncoderParams& ae, const Matrix& x, double sigma, Rng& rng) {
  ae.validate();
  if (x.rows() != ae.visible()) throw DimensionError("autoencoder: input " + x.shape() + " vs W " + ae.W.shape());
  if (!(sigma >= 0.0)) throw ParameterError("autoencoder: sigma must be >= 0");
  const double inv_batch = 1.0 / static_cast<double>(std::max<std::size_t>(x.cols(), 1));
  auto noisy = [&](Matrix m) {
    if (sigma > 0.0) {
      for (double& v : m.data()) v += sigma * rng.normal();
    }
    return m;
  };

  AutoEncoderGrads out;
  const Matrix h = encode(ae, x);
  const Matrix h_noisy = noisy(h);
  const Matrix z = decode(ae, h_noisy);

  Matrix dz = z - x;
  out.metrics.decoder_loss = squared_norm(dz.data()) * inv_batch;
  Matrix dz_pre = hadamard(dz, activation_deriv(Activation::sigmoid, z));
  dz_pre *= 2.0 * inv_batch;
  out.W_decoder = matmul_nt(h_noisy, dz_pre);
  out.c = row_sums(dz_pre);

  Matrix h_target = h * 2.0 - encode(ae, z);
  const Matrix x_noisy = noisy(x);
  const Matrix hf = encode(ae, x_noisy);
  Matrix dh = hf - h_target;
  out.metrics.encoder_loss = squared_norm(dh.data()) * inv_batch;
  Matrix dh_pre = hadamard(dh, activation_deriv(Activation::sigmoid, hf));
  dh_pre *= 2.0 * inv_batch;
  out.W_encoder = matmul_nt(dh_pre, x_noisy);
  out.b = row_sums(dh_pre);
  return out;
}

/// One back-propagation-free auto-encoder step. Both losses are evaluated at
/// the same parameters; the tied weight receives the sum of the decoder and
/// encoder contributions in a single optimizer step.
inline AutoEncoderMetrics dtp_autoencoder_step(AutoEncoderParams& ae, const Matrix& x, double sigma,
                                               AutoEncoderOptimizer& opt, Rng& rng) {
  AutoEncoderGrads g = autoencoder_grads(ae, x, sigma, rng);
  if (!std::isfinite(g.metrics.decoder_loss) || !std::isfinite(g.metrics.encoder_loss)) {
    throw NumericalError("dtp_autoencoder_step: loss is not finite");
  }
  step(opt.cfg, opt.W, ae.W, g.W_decoder + g.W_encoder);
  step(opt.cfg, opt.b, ae.b, g.b);
  step(opt.cfg, opt.c, ae.c, g.c);
  return g.metrics;
}

}  // namespace tprop
