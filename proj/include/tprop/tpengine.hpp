#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tprop/errors.hpp"
#include "tprop/layers.hpp"
#include "tprop/linalg.hpp"
#include "tprop/rng.hpp"

namespace tprop {

enum class LossKind { mse, cross_entropy };

inline std::string_view to_string(LossKind k) { return k == LossKind::mse ? "mse" : "cross_entropy"; }

/// Floor applied inside log() so a saturated softmax gives a finite loss.
inline constexpr double kLogFloor = 1e-12;

namespace detail {
inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": " + a.shape() + " vs " + b.shape());
}
}  // namespace detail

/// Mean over samples (columns) of the per-sample loss:
/// mse -> ||out - y||^2, cross_entropy -> -sum_k y_k log(out_k).
inline double global_loss(LossKind kind, const Matrix& output, const Matrix& y) {
  detail::require_same_shape(output, y, "global_loss");
  if (output.cols() == 0) return 0.0;
  double total = 0.0;
  if (kind == LossKind::mse) {
    for (std::size_t i = 0; i < output.size(); ++i) {
      const double d = output.data()[i] - y.data()[i];
      total += d * d;
    }
  } else {
    for (std::size_t i = 0; i < output.size(); ++i) {
      const double t = y.data()[i];
      if (t != 0.0) total -= t * std::log(std::max(output.data()[i], kLogFloor));
    }
  }
  return total / static_cast<double>(output.cols());
}

inline double global_loss(LossKind kind, const Vector& output, const Vector& y) {
  return global_loss(kind, output.as_column(), y.as_column());
}

/// Per-sample dL/d(output) (not averaged over the batch).
inline Matrix global_loss_grad(LossKind kind, const Matrix& output, const Matrix& y) {
  detail::require_same_shape(output, y, "global_loss_grad");
  Matrix g(output.rows(), output.cols());
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double o = output.data()[i];
    const double t = y.data()[i];
    g.data()[i] = kind == LossKind::mse ? 2.0 * (o - t) : (t == 0.0 ? 0.0 : -t / std::max(o, kLogFloor));
  }
  return g;
}

/// Per-sample dL/d(pre-activation) of the top layer. Cross-entropy is only
/// legal on a softmax output, where the combined derivative is p - y.
inline Matrix output_delta(LossKind kind, Activation top_act, const Matrix& output, const Matrix& y) {
  detail::require_same_shape(output, y, "output_delta");
  if (kind == LossKind::cross_entropy) {
    if (top_act != Activation::softmax) throw ConfigError("cross-entropy loss requires a softmax output layer");
    return output - y;
  }
  if (top_act == Activation::softmax) {
    // mse through softmax: J^T g with J = diag(p) - p p^T.
    Matrix g = global_loss_grad(kind, output, y);
    Matrix d(output.rows(), output.cols());
    for (std::size_t c = 0; c < output.cols(); ++c) {
      double pg = 0.0;
      for (std::size_t r = 0; r < output.rows(); ++r) pg += output(r, c) * g(r, c);
      for (std::size_t r = 0; r < output.rows(); ++r) d(r, c) = output(r, c) * (g(r, c) - pg);
    }
    return d;
  }
  return hadamard(global_loss_grad(kind, output, y), activation_deriv(top_act, output));
}

/// h_M - eta_hat * dL/dh_M.
inline Matrix top_target(const Matrix& h_top, const Matrix& y, LossKind kind, double eta_hat) {
  if (!(eta_hat > 0.0)) throw ParameterError("top_target: eta_hat must be > 0");
  return h_top - eta_hat * global_loss_grad(kind, h_top, y);
}

inline Vector top_target(const Vector& h_top, const Vector& y, LossKind kind, double eta_hat) {
  return Vector::from_column(top_target(h_top.as_column(), y.as_column(), kind, eta_hat));
}

/// Target of the top hidden layer from the global loss, differentiated
/// through the top layer only:
///   target = h_{M-1} - eta_tilde * W_M^T delta_M.
/// `top_input` is what the top layer actually consumes (the wire value of
/// layer M-1, e.g. a Bernoulli sample); `h_prev` is the activation being
/// displaced (e.g. the firing probability).
inline Matrix top_hidden_target(const Matrix& h_prev, const Matrix& top_input, const ForwardLayer& top,
                                const Matrix& y, LossKind kind, double eta_tilde) {
  if (!(eta_tilde > 0.0)) throw ParameterError("top_hidden_target: eta_tilde must be > 0");
  detail::require_same_shape(h_prev, top_input, "top_hidden_target");
  const Matrix out = forward(top, top_input).activation;
  const Matrix delta = output_delta(kind, top.act, out, y);
  return h_prev - eta_tilde * matmul_tn(top.W, delta);
}

inline Matrix top_hidden_target(const Matrix& h_prev, const ForwardLayer& top, const Matrix& y, LossKind kind,
                                double eta_tilde) {
  return top_hidden_target(h_prev, h_prev, top, y, kind, eta_tilde);
}

/// Vanilla target propagation: the target below is g_i(target_i).
inline Matrix vanilla_tp_target(const InverseLayer& g, const Matrix& target) { return inverse(g, target); }

inline Vector vanilla_tp_target(const InverseLayer& g, const Vector& target) { return inverse(g, target); }

/// Difference target propagation:
///   target_{i-1} = h_{i-1} + g_i(target_i) - g_i(h_i).
/// When target_i == h_i the correction is exactly zero, so h_{i-1} is
/// returned unchanged.
inline Matrix dtp_target(const Matrix& h_prev, const Matrix& h, const Matrix& target, const InverseLayer& g) {
  detail::require_same_shape(h, target, "dtp_target");
  Matrix correction = inverse(g, target) - inverse(g, h);
  detail::require_same_shape(h_prev, correction, "dtp_target");
  return h_prev + correction;
}

inline Vector dtp_target(const Vector& h_prev, const Vector& h, const Vector& target, const InverseLayer& g) {
  return Vector::from_column(dtp_target(h_prev.as_column(), h.as_column(), target.as_column(), g));
}

struct LocalGrad {
  double loss = 0.0;  // mean over the batch
  Matrix grad_weight;
  Vector grad_bias;
};

/// L_i = ||s(W input + b) - target||^2, target held constant. For stochastic
/// layers this compares probabilities; for discretized layers the pre-sign
/// activation. Loss and gradients are averaged over the batch.
inline LocalGrad local_forward_loss_grad(const ForwardLayer& layer, const Matrix& input, const Matrix& target) {
  if (layer.act == Activation::sign || layer.act == Activation::softmax) {
    throw UnsupportedError("local_forward_loss_grad: activation '" + std::string(to_string(layer.act)) +
                           "' has no element-wise derivative");
  }
  layer.validate();
  const Matrix act = activate(layer.act, affine(layer.W, layer.b, input));
  detail::require_same_shape(act, target, "local_forward_loss_grad");
  const double inv_batch = 1.0 / static_cast<double>(std::max<std::size_t>(input.cols(), 1));
  Matrix diff = act - target;
  LocalGrad out;
  out.loss = squared_norm(diff.data()) * inv_batch;
  Matrix grad_pre = hadamard(diff, activation_deriv(layer.act, act));
  grad_pre *= 2.0 * inv_batch;
  out.grad_weight = matmul_nt(grad_pre, input);
  out.grad_bias = row_sums(grad_pre);
  return out;
}

/// L_inv = ||g(f(h + eps)) - (h + eps)||^2 with eps ~ N(0, sigma^2), one
/// draw per call. Gradients are taken with respect to g's parameters only.
/// `upstream` is the transmission of the layer that produced h: a
/// discretized wire means f reads sign(h + eps). Stochastic layers are fed
/// probabilities directly (no sampling).
inline LocalGrad inverse_loss_grad(const ForwardLayer& f, const InverseLayer& g, const Matrix& h_prev, double sigma,
                                   Rng& rng, Transmit upstream = Transmit::real) {
  if (!(sigma >= 0.0)) throw ParameterError("inverse_loss_grad: sigma must be >= 0");
  if (g.act == Activation::sign || g.act == Activation::softmax) {
    throw UnsupportedError("inverse_loss_grad: inverse activation must be element-wise differentiable");
  }
  Matrix noisy = h_prev;
  if (sigma > 0.0) {
    for (double& v : noisy.data()) v += sigma * rng.normal();
  }
  const Matrix wire = upstream == Transmit::discretized ? sign_step(noisy) : noisy;
  f.validate();
  Matrix u = activate(f.act, affine(f.W, f.b, wire));
  if (g.binarize_input) u = sign_step(u);
  const Matrix z = activate(g.act, affine(g.V, g.c, u));
  detail::require_same_shape(z, noisy, "inverse_loss_grad");

  const double inv_batch = 1.0 / static_cast<double>(std::max<std::size_t>(h_prev.cols(), 1));
  Matrix diff = z - noisy;
  LocalGrad out;
  out.loss = squared_norm(diff.data()) * inv_batch;
  Matrix grad_pre = hadamard(diff, activation_deriv(g.act, z));
  grad_pre *= 2.0 * inv_batch;
  out.grad_weight = matmul_nt(grad_pre, u);
  out.grad_bias = row_sums(grad_pre);
  return out;
}

/// sigma(e) = sigma0 / (1 + e / e0).
struct NoiseSchedule {
  double sigma0 = 0.0;
  double e0 = 1.0;

  void validate() const {
    if (!(sigma0 >= 0.0)) throw ConfigError("noise.sigma0 must be >= 0");
    if (!(e0 > 0.0)) throw ConfigError("noise.e0 must be > 0");
  }
};

inline double noise_sigma(const NoiseSchedule& s, std::size_t epoch) {
  return s.sigma0 / (1.0 + static_cast<double>(epoch) / s.e0);
}

}  // namespace tprop
