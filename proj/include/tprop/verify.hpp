#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "tprop/baselines.hpp"
#include "tprop/errors.hpp"
#include "tprop/layers.hpp"
#include "tprop/linalg.hpp"
#include "tprop/models.hpp"
#include "tprop/optim.hpp"
#include "tprop/rng.hpp"
#include "tprop/tpengine.hpp"

namespace tprop {

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace detail

// ===========================================================================
// Angle between target-propagation and backprop updates

struct AngleReport {
  double eta_hat = 0.0;
  double cos_alpha = 0.0;             // trace inner product of the two updates
  double cos_alpha_vectorized = 0.0;  // dot product of their vectorisations
  double lambda_max = 0.0;            // singular values of (J_M ... J_{i+1})^T
  double lambda_min = 0.0;
  double bound_kappa_inverse = 0.0;   // lambda_min / lambda_max
  std::size_t layer = 0;
};

enum class JacobianShape { random, orthogonal };

inline std::string_view to_string(JacobianShape s) { return s == JacobianShape::random ? "random" : "orthogonal"; }

struct Theorem1Options {
  std::size_t layer = 1;  // 1-based layer whose update is compared
  JacobianShape construction = JacobianShape::random;
  double preact_clamp = 3.0;
  double singular_lo = 0.5;  // random construction: singular values of W_k drawn from [lo, hi]
  double singular_hi = 1.5;
  int max_retries = 50;
};

/// h_k = W_k tanh(h_{k-1}), k = 1..M, all square, plus the input h_0 and a
/// regression target y for L = ||h_M - y||^2.
struct TanhChain {
  std::vector<Matrix> W;
  Matrix h0;
  Matrix y;
};

/// Draws a chain whose pre-activations stay within `preact_clamp` (weights
/// are rescaled layer by layer). The orthogonal construction sets
/// W_k = Q_k diag(tanh'(h_{k-1}))^{-1}, so every Jacobian
/// J_k = W_k diag(tanh'(h_{k-1})) is a scaled orthogonal matrix.
inline TanhChain build_tanh_chain(std::size_t depth, std::size_t width, const Theorem1Options& opt, Rng& rng) {
  TanhChain chain;
  const bool ortho = opt.construction == JacobianShape::orthogonal;
  chain.h0 = gaussian_matrix(width, 1, ortho ? 0.3 : 1.0, rng);
  Matrix h = chain.h0;
  for (std::size_t k = 1; k <= depth; ++k) {
    const Matrix a = activate(Activation::tanh, h);
    Matrix Wk;
    if (ortho) {
      Wk = orthogonal_init(width, width, 1.0, rng);
      for (std::size_t r = 0; r < width; ++r)
        for (std::size_t c = 0; c < width; ++c) Wk(r, c) /= 1.0 - a(c, 0) * a(c, 0);
    } else {
      // U diag(s) V^T with Haar-random U, V and s uniform on the configured range.
      const Matrix U = orthogonal_init(width, width, 1.0, rng);
      Matrix V = orthogonal_init(width, width, 1.0, rng);
      for (std::size_t r = 0; r < width; ++r) {
        const double s = opt.singular_lo + (opt.singular_hi - opt.singular_lo) * rng.uniform();
        for (std::size_t c = 0; c < width; ++c) V(r, c) *= s;
      }
      Wk = matmul(U, V);
    }
    Matrix hk = matmul(Wk, a);
    const double peak = detail::max_abs(hk.data());
    if (peak > opt.preact_clamp) {
      Wk *= opt.preact_clamp / peak;
      hk = matmul(Wk, a);
    }
    chain.W.push_back(std::move(Wk));
    h = std::move(hk);
  }
  chain.y = h + gaussian_matrix(width, 1, 1.0, rng);
  return chain;
}

/// Exact inverse of h -> W tanh(h).
inline Matrix tanh_chain_inverse(const Matrix& W, const Matrix& target) {
  Eigen::PartialPivLU<Matrix::EigenMat> lu(W.eigen());
  Matrix u(target.rows(), target.cols());
  u.eigen() = lu.solve(target.eigen());
  for (double& v : u.data()) {
    if (!(std::abs(v) < 1.0)) throw NumericalError("tanh_chain_inverse: target leaves the range of tanh");
    v = std::atanh(v);
  }
  return u;
}

namespace detail {

inline double cosine_vectorized(const Matrix& a, const Matrix& b) {
  // Column-major traversal, independent of frobenius_dot's ordering.
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
      dot += a(r, c) * b(r, c);
      na += a(r, c) * a(r, c);
      nb += b(r, c) * b(r, c);
    }
  }
  return dot / std::sqrt(na * nb);
}

inline std::vector<AngleReport> evaluate_angles(const TanhChain& chain, std::span<const double> etas,
                                                std::size_t layer) {
  const std::size_t M = chain.W.size();
  const std::size_t n = chain.h0.rows();
  // In terms of a_k = tanh(h_k) the chain is an ordinary MLP: tanh layers
  // followed by a linear top layer, so the baselines module supplies dL/dW.
  std::vector<ForwardLayer> layers;
  for (std::size_t k = 0; k < M; ++k) {
    layers.push_back({chain.W[k], Vector(n), k + 1 < M ? Activation::tanh : Activation::identity, Transmit::real});
  }
  const Matrix a0 = activate(Activation::tanh, chain.h0);
  const ForwardCache cache = forward_pass(layers, a0);
  const BackpropGrads grads = backprop(layers, cache, chain.y, LossKind::mse);
  const Matrix bp = grads.layers[layer - 1].weight * -1.0;

  Matrix product = Matrix::identity(n);
  for (std::size_t k = layer + 1; k <= M; ++k) {
    Matrix J = chain.W[k - 1];
    const Matrix& a = cache.acts[k - 1];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) J(r, c) *= 1.0 - a(c, 0) * a(c, 0);
    product = matmul(J, product);
  }
  const Vector sv = svd_singular_values(product.transposed());

  const ForwardLayer linear_i{chain.W[layer - 1], Vector(n), Activation::identity, Transmit::real};
  const Matrix h_top = cache.output();
  std::vector<AngleReport> out;
  for (double eta : etas) {
    Matrix target = top_target(h_top, chain.y, LossKind::mse, eta);
    for (std::size_t k = M; k > layer; --k) target = tanh_chain_inverse(chain.W[k - 1], target);
    const Matrix tp = local_forward_loss_grad(linear_i, cache.acts[layer - 1], target).grad_weight * -1.0;

    AngleReport rep;
    rep.eta_hat = eta;
    rep.layer = layer;
    rep.cos_alpha = frobenius_dot(bp, tp) / (frobenius_norm(bp) * frobenius_norm(tp));
    rep.cos_alpha_vectorized = cosine_vectorized(bp, tp);
    rep.lambda_max = sv[0];
    rep.lambda_min = sv[n - 1];
    rep.bound_kappa_inverse = rep.lambda_min / rep.lambda_max;
    if (!std::isfinite(rep.cos_alpha)) throw NumericalError("theorem1_check: degenerate update");
    out.push_back(rep);
  }
  return out;
}

}  // namespace detail

/// Angle between the backprop update of W_layer and the update obtained by
/// target propagation with exact inverses, for each step size in `etas`, all
/// on one randomly drawn chain. Draws that are ill-conditioned or push a
/// target outside the range of tanh are redrawn.
inline std::vector<AngleReport> theorem1_sweep(std::size_t depth, std::size_t width, std::span<const double> etas,
                                               Rng rng, const Theorem1Options& opt = {}) {
  if (depth < 1 || width < 1) throw ParameterError("theorem1_check: depth and width must be >= 1");
  if (opt.layer < 1 || opt.layer > depth) {
    throw ParameterError("theorem1_check: layer must lie in [1, " + std::to_string(depth) + "]");
  }
  for (double eta : etas) {
    if (!(eta > 0.0)) throw ParameterError("theorem1_check: eta_hat must be > 0");
  }
  std::string last;
  for (int attempt = 0; attempt <= opt.max_retries; ++attempt) {
    try {
      const TanhChain chain = build_tanh_chain(depth, width, opt, rng);
      return detail::evaluate_angles(chain, etas, opt.layer);
    } catch (const NumericalError& e) {
      last = e.what();
    }
  }
  throw NumericalError("theorem1_check: no usable draw after " + std::to_string(opt.max_retries + 1) +
                       " attempts (" + last + ")");
}

inline AngleReport theorem1_check(std::size_t depth, std::size_t width, double eta_hat, Rng rng,
                                  const Theorem1Options& opt = {}) {
  const double etas[] = {eta_hat};
  return theorem1_sweep(depth, width, etas, rng, opt).front();
}

// ===========================================================================
// Local-loss decrease under difference targets

struct Thm2Report {
  double lambda = 0.0;       // largest eigenvalue of (I - J_f J_g)^T (I - J_f J_g)
  double lhs = 0.0;          // ||target_i - f(target_{i-1})||^2
  double rhs = 0.0;          // ||target_i - h_i||^2
  double target_norm = 0.0;  // ||e||
};

/// d f / d input at `input` (out x in) for a real-valued layer.
inline Matrix layer_jacobian(const ForwardLayer& f, const Matrix& input) {
  if (f.transmit != Transmit::real) throw UnsupportedError("layer_jacobian: layer output is not differentiable");
  const Matrix d = activation_deriv(f.act, forward(f, input).activation);
  Matrix J = f.W;
  for (std::size_t r = 0; r < J.rows(); ++r)
    for (std::size_t c = 0; c < J.cols(); ++c) J(r, c) *= d(r, 0);
  return J;
}

inline Matrix inverse_jacobian(const InverseLayer& g, const Matrix& input) {
  if (g.binarize_input) throw UnsupportedError("inverse_jacobian: binarized input is not differentiable");
  const Matrix d = activation_deriv(g.act, inverse(g, input));
  Matrix J = g.V;
  for (std::size_t r = 0; r < J.rows(); ++r)
    for (std::size_t c = 0; c < J.cols(); ++c) J(r, c) *= d(r, 0);
  return J;
}

/// Largest eigenvalue of (I - J_f J_g)^T (I - J_f J_g), with J_f taken at
/// h_prev and J_g at h = f(h_prev).
inline double theorem2_lambda(const ForwardLayer& f, const InverseLayer& g, const Vector& h_prev) {
  const Matrix x = h_prev.as_column();
  const Matrix h = forward(f, x).activation;
  Matrix A = Matrix::identity(f.out()) - matmul(layer_jacobian(f, x), inverse_jacobian(g, h));
  Matrix gram = matmul_tn(A, A);
  // Symmetrise away rounding so the eigen-solver sees an exactly symmetric matrix.
  for (std::size_t r = 0; r < gram.rows(); ++r)
    for (std::size_t c = r + 1; c < gram.cols(); ++c) gram(r, c) = gram(c, r) = 0.5 * (gram(r, c) + gram(c, r));
  return std::max(0.0, largest_eigenvalue_sym(gram));
}

inline Thm2Report theorem2_check(const ForwardLayer& f, const InverseLayer& g, const Vector& h_prev, const Vector& e) {
  if (h_prev.size() != f.in() || e.size() != f.out()) {
    throw DimensionError("theorem2_check: h_prev has " + std::to_string(h_prev.size()) + " entries and e " +
                         std::to_string(e.size()) + " for layer " + f.W.shape());
  }
  const Matrix x = h_prev.as_column();
  const Matrix h = forward(f, x).activation;
  const Matrix target = h + e.as_column();
  const Matrix target_prev = dtp_target(x, h, target, g);
  Thm2Report rep;
  rep.lhs = squared_norm((target - forward(f, target_prev).activation).data());
  rep.rhs = squared_norm((target - h).data());
  rep.target_norm = norm(e);
  rep.lambda = theorem2_lambda(f, g, h_prev);
  return rep;
}

/// A forward mapping, a feedback mapping and the point they are probed at.
struct LayerPair {
  ForwardLayer f;
  InverseLayer g;
  Vector h_prev;
};

/// Linear f(h) = W h + b with its exact inverse g(h) = W^{-1} (h - b).
inline LayerPair exact_linear_pair(std::size_t width, Rng& rng) {
  for (int attempt = 0; attempt < 50; ++attempt) {
    Matrix W = gaussian_matrix(width, width, 1.0 / std::sqrt(static_cast<double>(width)), rng);
    const Vector sv = svd_singular_values(W);
    if (sv[width - 1] < 1e-2 * sv[0]) continue;
    const Vector b = gaussian_noise(width, 0.1, rng);
    const Matrix V = inverse(W);
    Matrix c = matmul(V, b.as_column()) * -1.0;
    return {ForwardLayer{W, b, Activation::identity, Transmit::real},
            InverseLayer{V, Vector::from_column(c), Activation::identity, false}, gaussian_noise(width, 1.0, rng)};
  }
  throw NumericalError("exact_linear_pair: no well-conditioned draw");
}

/// tanh forward layer with a tanh feedback layer trained on the noisy inverse
/// loss around h_prev, the way feedback mappings are trained during DTP.
inline LayerPair trained_tanh_pair(std::size_t width, Rng& rng, std::size_t steps = 4000, std::size_t batch = 16,
                                   double sigma = 0.1) {
  LayerPair p;
  p.f = ForwardLayer{orthogonal_init(width, width, 1.0, rng), gaussian_noise(width, 0.1, rng), Activation::tanh,
                     Transmit::real};
  p.g = InverseLayer{orthogonal_init(width, width, 1.0, rng), Vector(width), Activation::tanh, false};
  p.h_prev = Vector(width);
  for (double& v : p.h_prev) v = rng.uniform() - 0.5;
  Matrix around(width, batch);
  for (std::size_t r = 0; r < width; ++r)
    for (std::size_t c = 0; c < batch; ++c) around(r, c) = p.h_prev[r];
  OptimizerConfig cfg{OptimizerKind::rmsprop, 1e-2, 0.9, 1e-8};
  LayerOptState state;
  for (std::size_t t = 0; t < steps; ++t) {
    if (t == steps / 2) cfg.lr = 1e-3;
    const LocalGrad gr = inverse_loss_grad(p.f, p.g, around, sigma, rng);
    step(cfg, state.weight, p.g.V, gr.grad_weight);
    step(cfg, state.bias, p.g.c, gr.grad_bias);
  }
  return p;
}

struct Thm2Sweep {
  double lambda = 0.0;
  double target_norm = 0.0;    // scale at which the sweep stopped
  double pass_fraction = 0.0;  // fraction of directions with lhs < rhs there
  bool stabilized = false;     // pass_fraction reached the requirement
};

/// Draws `directions` random unit directions and scales them by ||e|| =
/// start, start/10, ... down to `floor`, stopping at the first scale where
/// the strict inequality lhs < rhs holds for at least `required` of them.
inline Thm2Sweep theorem2_sweep(const LayerPair& p, std::size_t directions, Rng& rng, double start = 1e-1,
                                double floor = 1e-6, double required = 0.99) {
  if (directions == 0) throw ParameterError("theorem2_sweep: directions must be >= 1");
  Thm2Sweep out;
  out.lambda = theorem2_lambda(p.f, p.g, p.h_prev);
  for (double scale = start; scale >= floor * (1.0 - 1e-9); scale /= 10.0) {
    std::size_t ok = 0;
    for (std::size_t d = 0; d < directions; ++d) {
      Vector e = gaussian_noise(p.f.out(), 1.0, rng);
      const double n = norm(e);
      for (double& v : e) v *= scale / n;
      const Thm2Report rep = theorem2_check(p.f, p.g, p.h_prev, e);
      if (rep.lhs < rep.rhs) ++ok;
    }
    out.target_norm = scale;
    out.pass_fraction = static_cast<double>(ok) / static_cast<double>(directions);
    if (out.pass_fraction >= required) {
      out.stabilized = true;
      break;
    }
  }
  return out;
}

// ===========================================================================
// Convergence of a linear feedback mapping to the inverse

struct Prop2Options {
  std::size_t dim = 4;
  std::size_t steps = 100000;
  double eta_v0 = 2e-3;  // eta_v(t) = eta_v0 / (1 + t / t0_v)
  double t0_v = 1000.0;
  double eta_w0 = 0.0;   // 0 freezes W
  double t0_w = 1000.0;
  double input_noise = 0.1;       // sigma of the corruption in the inverse loss
  double regression_noise = 0.1;  // label noise of W's regression task
  double max_condition = 1e8;
};

/// gammas[t] = ||V_t - W_t^{-1}||_F^2 after t steps (gammas[0] is the start).
struct Prop2Trace {
  std::vector<double> gammas;
};

/// f(h) = W h, g(h) = V h. V follows SGD on ||V W (h + eps) - (h + eps)||^2
/// with h ~ N(0, I); W (unless frozen) follows SGD on a fixed noisy linear
/// regression task. Both rates decay as eta0 / (1 + t / t0).
inline Prop2Trace prop2_check(const Prop2Options& opt, Rng rng) {
  if (opt.dim < 1) throw ParameterError("prop2_check: dim must be >= 1");
  if (!(opt.eta_v0 > 0.0) || !(opt.t0_v > 0.0) || !(opt.t0_w > 0.0) || opt.eta_w0 < 0.0) {
    throw ParameterError("prop2_check: rates must be > 0 (eta_w0 may be 0)");
  }
  using Mat = Eigen::MatrixXd;
  using Vec = Eigen::VectorXd;
  const auto n = static_cast<Eigen::Index>(opt.dim);
  auto gauss_vec = [&](double sigma) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = sigma * rng.normal();
    return v;
  };

  Mat W_star = orthogonal_init(opt.dim, opt.dim, 1.0, rng).eigen();
  for (Eigen::Index j = 0; j < n; ++j) W_star.col(j) *= n > 1 ? 0.75 + 0.5 * static_cast<double>(j) / static_cast<double>(n - 1) : 1.0;
  Mat W = W_star;
  if (opt.eta_w0 > 0.0) W += gaussian_matrix(opt.dim, opt.dim, 0.3 / std::sqrt(static_cast<double>(opt.dim)), rng).eigen();
  Mat V = gaussian_matrix(opt.dim, opt.dim, 0.5 / std::sqrt(static_cast<double>(opt.dim)), rng).eigen();

  auto condition = [](const Mat& m) {
    Eigen::JacobiSVD<Mat> svd(m);
    const auto& s = svd.singularValues();
    return s(0) / s(s.size() - 1);
  };
  if (condition(W) > opt.max_condition) throw NumericalError("prop2_check: initial W is ill-conditioned");

  Mat W_inv = W.inverse();
  Prop2Trace trace;
  trace.gammas.reserve(opt.steps + 1);
  trace.gammas.push_back((V - W_inv).squaredNorm());
  for (std::size_t t = 0; t < opt.steps; ++t) {
    const double td = static_cast<double>(t);
    const Vec u = gauss_vec(1.0) + gauss_vec(opt.input_noise);
    const Vec fu = W * u;
    const Vec r = V * fu - u;
    V.noalias() -= (opt.eta_v0 / (1.0 + td / opt.t0_v)) * 2.0 * r * fu.transpose();
    if (opt.eta_w0 > 0.0) {
      const Vec x = gauss_vec(1.0);
      const Vec d = W * x - (W_star * x + gauss_vec(opt.regression_noise));
      W.noalias() -= (opt.eta_w0 / (1.0 + td / opt.t0_w)) * 2.0 * d * x.transpose();
      if ((t + 1) % 1000 == 0) {
        const double cond = condition(W);
        if (!(cond <= opt.max_condition)) {
          throw NumericalError("prop2_check: W became near-singular at step " + std::to_string(t + 1) +
                               " (condition number " + detail::fmt_real(cond) + ")");
        }
      }
      W_inv = W.inverse();
    }
    const double gamma = (V - W_inv).squaredNorm();
    if (!std::isfinite(gamma)) throw NumericalError("prop2_check: diverged at step " + std::to_string(t + 1));
    trace.gammas.push_back(gamma);
  }
  return trace;
}

/// Mean of gammas[center - half .. center + half].
inline double window_mean(const Prop2Trace& trace, std::size_t center, std::size_t half) {
  if (center < half || center + half >= trace.gammas.size()) {
    throw ParameterError("window_mean: window around " + std::to_string(center) + " leaves the trace");
  }
  double s = 0.0;
  for (std::size_t t = center - half; t <= center + half; ++t) s += trace.gammas[t];
  return s / static_cast<double>(2 * half + 1);
}

// ===========================================================================
// Finite-difference audit of every analytic gradient

inline constexpr double kAuditStep = 1e-6;
inline constexpr double kAuditTolerance = 1e-5;

/// ||a - n|| / max(||a||, ||n||); 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> n) {
  if (a.size() != n.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - n[i]) * (a[i] - n[i]);
  const double scale = std::max(std::sqrt(squared_norm(a)), std::sqrt(squared_norm(n)));
  if (scale == 0.0) return 0.0;
  return std::sqrt(diff) / scale;
}

/// Central differences of `loss` with respect to every entry of `params`, in
/// order. Entries are restored afterwards.
inline std::vector<double> central_difference(const std::vector<std::span<double>>& params,
                                              const std::function<double()>& loss, double h = kAuditStep) {
  std::vector<double> g;
  for (auto p : params) {
    for (double& v : p) {
      const double saved = v;
      v = saved + h;
      const double up = loss();
      v = saved - h;
      const double down = loss();
      v = saved;
      g.push_back((up - down) / (2.0 * h));
    }
  }
  return g;
}

inline std::vector<double> flatten(std::initializer_list<std::span<const double>> parts) {
  std::vector<double> out;
  for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

enum class AuditTarget { local_forward, inverse_loss, backprop, straight_through, frozen_lower, top_hidden_target, autoencoder };

inline std::string_view to_string(AuditTarget t) {
  switch (t) {
    case AuditTarget::local_forward: return "local_forward";
    case AuditTarget::inverse_loss: return "inverse_loss";
    case AuditTarget::backprop: return "backprop";
    case AuditTarget::straight_through: return "straight_through";
    case AuditTarget::frozen_lower: return "frozen_lower";
    case AuditTarget::top_hidden_target: return "top_hidden_target";
    case AuditTarget::autoencoder: return "autoencoder";
  }
  return "?";
}

inline std::vector<AuditTarget> all_audit_targets() {
  return {AuditTarget::local_forward,    AuditTarget::inverse_loss,      AuditTarget::backprop,
          AuditTarget::straight_through, AuditTarget::frozen_lower,      AuditTarget::top_hidden_target,
          AuditTarget::autoencoder};
}

struct AuditEntry {
  std::string name;
  std::size_t trials = 0;
  double max_rel_err = 0.0;
  bool pass(double tol = kAuditTolerance) const { return max_rel_err < tol; }
};

namespace detail {

inline ForwardLayer random_layer(std::size_t in, std::size_t out, Activation act, Transmit tr, Rng& rng) {
  return {gaussian_matrix(out, in, 0.7, rng), gaussian_noise(out, 0.2, rng), act, tr};
}

// Redraws until no pre-activation sits within 1e-3 of the relu kink.
inline bool away_from_kinks(std::span<const ForwardLayer> layers, const Matrix& x) {
  Matrix h = x;
  for (const auto& l : layers) {
    const Matrix pre = affine(l.W, l.b, h);
    if (l.act == Activation::relu) {
      for (double v : pre.data())
        if (std::abs(v) <= 1e-3) return false;
    }
    h = forward(l, h).output;
  }
  return true;
}

inline Matrix random_targets(LossKind kind, std::size_t classes, std::size_t batch, Rng& rng) {
  if (kind == LossKind::mse) return gaussian_matrix(classes, batch, 0.5, rng);
  Matrix y(classes, batch);
  for (std::size_t c = 0; c < batch; ++c) y(rng.uniform_index(classes), c) = 1.0;
  return y;
}

inline std::vector<std::span<double>> layer_params(std::vector<ForwardLayer>& layers, std::size_t first = 0) {
  std::vector<std::span<double>> p;
  for (std::size_t i = first; i < layers.size(); ++i) {
    p.push_back(layers[i].W.data());
    p.push_back(layers[i].b.data());
  }
  return p;
}

inline std::vector<double> grad_flat(const BackpropGrads& g, std::size_t first = 0) {
  std::vector<double> out;
  for (std::size_t i = first; i < g.layers.size(); ++i) {
    out.insert(out.end(), g.layers[i].weight.data().begin(), g.layers[i].weight.data().end());
    out.insert(out.end(), g.layers[i].bias.data().begin(), g.layers[i].bias.data().end());
  }
  return out;
}

inline double audit_local_forward(std::size_t t, Rng& rng) {
  static constexpr Activation acts[] = {Activation::tanh, Activation::sigmoid, Activation::relu, Activation::identity};
  const Activation act = acts[t % 4];
  std::vector<ForwardLayer> layer;
  Matrix x;
  do {
    layer = {random_layer(4, 3, act, Transmit::real, rng)};
    x = gaussian_matrix(4, 3, 1.0, rng);
  } while (!away_from_kinks(layer, x));
  const Matrix target = gaussian_matrix(3, 3, 0.5, rng);
  const LocalGrad g = local_forward_loss_grad(layer[0], x, target);
  const auto numeric = central_difference(layer_params(layer), [&] {
    return squared_norm((forward(layer[0], x).activation - target).data()) / static_cast<double>(x.cols());
  });
  return relative_error(flatten({g.grad_weight.data(), g.grad_bias.data()}), numeric);
}

inline double audit_inverse_loss(std::size_t t, Rng& rng) {
  static constexpr Activation g_acts[] = {Activation::tanh, Activation::sigmoid, Activation::identity};
  const Activation f_act = t % 2 == 0 ? Activation::tanh : Activation::sigmoid;
  const Transmit upstream = (t / 2) % 2 == 0 ? Transmit::real : Transmit::discretized;
  const bool binarize = (t / 4) % 2 == 1;
  const double sigma = (t / 8) % 2 == 0 ? 0.0 : 0.3;
  const ForwardLayer f = random_layer(4, 3, f_act, Transmit::real, rng);
  InverseLayer g{gaussian_matrix(4, 3, 0.7, rng), gaussian_noise(4, 0.2, rng), g_acts[t % 3], binarize};
  const Matrix h = gaussian_matrix(4, 3, 0.8, rng);
  const Rng noise = rng.split(t);

  Rng r0 = noise;
  const LocalGrad lg = inverse_loss_grad(f, g, h, sigma, r0, upstream);
  auto loss = [&] {
    Rng r = noise;
    Matrix noisy = h;
    if (sigma > 0.0)
      for (double& v : noisy.data()) v += sigma * r.normal();
    const Matrix wire = upstream == Transmit::discretized ? sign_step(noisy) : noisy;
    Matrix u = forward(f, wire).activation;
    if (g.binarize_input) u = sign_step(u);
    const Matrix z = activate(g.act, affine(g.V, g.c, u));
    return squared_norm((z - noisy).data()) / static_cast<double>(h.cols());
  };
  const auto numeric = central_difference({g.V.data(), g.c.data()}, loss);
  return relative_error(flatten({lg.grad_weight.data(), lg.grad_bias.data()}), numeric);
}

inline double audit_backprop(std::size_t t, Rng& rng) {
  struct Shape {
    Activation hidden, top;
    LossKind loss;
  };
  static constexpr Shape shapes[] = {{Activation::tanh, Activation::softmax, LossKind::cross_entropy},
                                     {Activation::sigmoid, Activation::softmax, LossKind::mse},
                                     {Activation::relu, Activation::identity, LossKind::mse},
                                     {Activation::tanh, Activation::sigmoid, LossKind::mse}};
  const Shape s = shapes[t % 4];
  std::vector<ForwardLayer> layers;
  Matrix x;
  do {
    layers = {random_layer(5, 4, s.hidden, Transmit::real, rng), random_layer(4, 4, s.hidden, Transmit::real, rng),
              random_layer(4, 3, s.top, Transmit::real, rng)};
    x = gaussian_matrix(5, 3, 1.0, rng);
  } while (!away_from_kinks(layers, x));
  const Matrix y = random_targets(s.loss, 3, 3, rng);
  const BackpropGrads g = backprop(layers, x, y, s.loss);
  const auto numeric = central_difference(
      layer_params(layers), [&] { return global_loss(s.loss, forward_pass(layers, x).output(), y); });
  return relative_error(grad_flat(g), numeric);
}

// Straight-through gradients coincide with the true gradient on the layers
// above the last discrete step; only those are compared.
inline double audit_straight_through(std::size_t t, Rng& rng) {
  const bool stochastic = t % 2 == 1;
  std::vector<ForwardLayer> layers;
  std::size_t first;
  if (stochastic) {
    layers = {random_layer(5, 4, Activation::sigmoid, Transmit::stochastic_binary, rng),
              random_layer(4, 4, Activation::sigmoid, Transmit::stochastic_binary, rng),
              random_layer(4, 3, Activation::softmax, Transmit::real, rng)};
    first = 2;
  } else {
    layers = {random_layer(5, 4, Activation::tanh, Transmit::discretized, rng),
              random_layer(4, 4, Activation::tanh, Transmit::real, rng),
              random_layer(4, 3, Activation::softmax, Transmit::real, rng)};
    first = 1;
  }
  const Matrix x = gaussian_matrix(5, 3, 1.0, rng);
  const Matrix y = random_targets(LossKind::cross_entropy, 3, 3, rng);
  const Rng samples = rng.split(t);
  Rng r0 = samples;
  const BackpropGrads g = straight_through_backprop(layers, forward_pass(layers, x, &r0), y, LossKind::cross_entropy);
  const auto numeric = central_difference(layer_params(layers, first), [&] {
    Rng r = samples;
    return global_loss(LossKind::cross_entropy, forward_pass(layers, x, &r).output(), y);
  });
  return relative_error(grad_flat(g, first), numeric);
}

inline double audit_frozen_lower(std::size_t t, Rng& rng) {
  const std::size_t freeze_below = 2 + t % 3;
  std::vector<ForwardLayer> layers = {random_layer(5, 4, Activation::tanh, Transmit::real, rng),
                                      random_layer(4, 4, Activation::tanh, Transmit::real, rng),
                                      random_layer(4, 4, Activation::tanh, Transmit::real, rng),
                                      random_layer(4, 3, Activation::softmax, Transmit::real, rng)};
  const Matrix x = gaussian_matrix(5, 3, 1.0, rng);
  const Matrix y = random_targets(LossKind::cross_entropy, 3, 3, rng);
  const BackpropGrads g = frozen_lower_backprop(layers, freeze_below, x, y, LossKind::cross_entropy);
  for (std::size_t i = 0; i + 1 < freeze_below; ++i) {
    if (max_abs(g.layers[i].weight.data()) != 0.0 || max_abs(g.layers[i].bias.data()) != 0.0) {
      return std::numeric_limits<double>::infinity();
    }
  }
  const auto numeric = central_difference(layer_params(layers, freeze_below - 1), [&] {
    return global_loss(LossKind::cross_entropy, forward_pass(layers, x).output(), y);
  });
  return relative_error(grad_flat(g, freeze_below - 1), numeric);
}

// With eta_tilde = 1, h - target is the per-sample gradient of the loss with
// respect to the top hidden activation.
inline double audit_top_hidden(std::size_t t, Rng& rng) {
  const Activation top_act = t % 3 == 2 ? Activation::sigmoid : Activation::softmax;
  const LossKind kind = t % 3 == 0 ? LossKind::cross_entropy : LossKind::mse;
  const ForwardLayer top = random_layer(4, 3, top_act, Transmit::real, rng);
  Matrix h = gaussian_matrix(4, 3, 1.0, rng);
  const Matrix y = random_targets(kind, 3, 3, rng);
  const Matrix analytic = h - top_hidden_target(h, top, y, kind, 1.0);
  const auto numeric = central_difference({h.data()}, [&] {
    return global_loss(kind, forward(top, h).activation, y) * static_cast<double>(h.cols());
  });
  return relative_error(analytic.data(), numeric);
}

inline double audit_autoencoder(std::size_t t, Rng& rng) {
  const double sigma = t % 2 == 0 ? 0.0 : 0.2;
  const AutoEncoderParams ae{gaussian_matrix(4, 6, 0.7, rng), gaussian_noise(4, 0.2, rng), gaussian_noise(6, 0.2, rng)};
  Matrix x(6, 3);
  for (double& v : x.data()) v = rng.uniform();
  const Rng noise = rng.split(t);
  Rng r0 = noise;
  const AutoEncoderGrads g = autoencoder_grads(ae, x, sigma, r0);

  // Replay the noise draws: hidden corruption first, then input corruption.
  Rng r = noise;
  const Matrix h = encode(ae, x);
  Matrix h_noisy = h;
  Matrix x_noisy = x;
  if (sigma > 0.0) {
    for (double& v : h_noisy.data()) v += sigma * r.normal();
    for (double& v : x_noisy.data()) v += sigma * r.normal();
  }
  const double inv_batch = 1.0 / static_cast<double>(x.cols());
  Matrix Wd = ae.W;
  Vector c = ae.c;
  auto decoder_loss = [&] {
    Matrix pre = matmul_tn(Wd, h_noisy);
    add_to_columns(pre, c);
    return squared_norm((activate(Activation::sigmoid, pre) - x).data()) * inv_batch;
  };
  const auto num_dec = central_difference({Wd.data(), c.data()}, decoder_loss);
  const double e_dec = relative_error(flatten({g.W_decoder.data(), g.c.data()}), num_dec);

  const Matrix target = h * 2.0 - encode(ae, decode(ae, h_noisy));
  Matrix We = ae.W;
  Vector b = ae.b;
  auto encoder_loss = [&] {
    return squared_norm((activate(Activation::sigmoid, affine(We, b, x_noisy)) - target).data()) * inv_batch;
  };
  const auto num_enc = central_difference({We.data(), b.data()}, encoder_loss);
  const double e_enc = relative_error(flatten({g.W_encoder.data(), g.b.data()}), num_enc);
  return std::max(e_dec, e_enc);
}

}  // namespace detail

/// Largest relative error between analytic and central-difference gradients
/// over `trials` random small instances of one gradient-producing operation.
inline AuditEntry gradient_audit(AuditTarget target, std::size_t trials, Rng rng) {
  AuditEntry e{std::string(to_string(target)), trials, 0.0};
  for (std::size_t t = 0; t < trials; ++t) {
    double err = 0.0;
    switch (target) {
      case AuditTarget::local_forward: err = detail::audit_local_forward(t, rng); break;
      case AuditTarget::inverse_loss: err = detail::audit_inverse_loss(t, rng); break;
      case AuditTarget::backprop: err = detail::audit_backprop(t, rng); break;
      case AuditTarget::straight_through: err = detail::audit_straight_through(t, rng); break;
      case AuditTarget::frozen_lower: err = detail::audit_frozen_lower(t, rng); break;
      case AuditTarget::top_hidden_target: err = detail::audit_top_hidden(t, rng); break;
      case AuditTarget::autoencoder: err = detail::audit_autoencoder(t, rng); break;
    }
    if (std::isnan(err)) err = std::numeric_limits<double>::infinity();
    e.max_rel_err = std::max(e.max_rel_err, err);
  }
  return e;
}

// ===========================================================================
// Suites: one CSV row per trial plus a pass/fail verdict

struct SuiteResult {
  std::string name;
  std::string csv;
  bool pass = true;
  std::vector<std::string> failures;
  std::string summary;
};

namespace detail {
inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t trial) { return seed + trial; }
}  // namespace detail

inline SuiteResult run_thm1_suite(std::uint64_t seed, std::size_t trials) {
  SuiteResult res;
  res.name = "thm1";
  res.csv = "seed,construction,layer,eta_hat,cos_alpha,lambda_max,lambda_min,pass\n";
  constexpr std::size_t depth = 4, width = 8;
  std::size_t random_ok = 0, ortho_ok = 0, gap_ok = 0;
  double worst_ortho = 1.0;
  auto row = [&](std::uint64_t s, std::string_view kind, const AngleReport& r, bool ok) {
    res.csv += std::to_string(s) + "," + std::string(kind) + "," + std::to_string(r.layer) + "," +
               detail::fmt_real(r.eta_hat) + "," + detail::fmt_real(r.cos_alpha) + "," + detail::fmt_real(r.lambda_max) +
               "," + detail::fmt_real(r.lambda_min) + "," + (ok ? "1" : "0") + "\n";
  };
  auto fail = [&](std::uint64_t s, const std::string& why) {
    res.pass = false;
    res.failures.push_back("seed " + std::to_string(s) + ": " + why);
  };
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = detail::trial_seed(seed, t);
    const Rng rng = Rng(s).split("thm1");

    const AngleReport r = theorem1_check(depth, width, 1e-4, rng.split("random"));
    const bool consistent = std::abs(r.cos_alpha - r.cos_alpha_vectorized) <= 1e-12 && r.cos_alpha <= 1.0 + 1e-12;
    const bool ok = r.cos_alpha > 0.0 && r.cos_alpha >= r.bound_kappa_inverse - 0.05 && consistent;
    row(s, "random", r, ok);
    if (ok) ++random_ok;
    else fail(s, "random net cos=" + detail::fmt_real(r.cos_alpha) + " bound=" + detail::fmt_real(r.bound_kappa_inverse));

    Theorem1Options top;
    top.layer = depth;
    const AngleReport g = theorem1_check(depth, width, 1e-4, rng.split("random"), top);
    const bool gap = std::abs(g.cos_alpha - 1.0) <= 1e-9;
    row(s, "random", g, gap);
    if (gap) ++gap_ok;
    else fail(s, "top layer cos=" + detail::fmt_real(g.cos_alpha) + " (expected 1)");

    Theorem1Options orth;
    orth.construction = JacobianShape::orthogonal;
    const double etas[] = {1e-2, 1e-3, 1e-4};
    const auto sweep = theorem1_sweep(depth, width, etas, rng.split("orthogonal"), orth);
    const bool mono = sweep[0].cos_alpha < sweep[1].cos_alpha && sweep[1].cos_alpha < sweep[2].cos_alpha;
    const bool high = sweep[2].cos_alpha >= 0.99;
    for (const auto& o : sweep) row(s, "orthogonal", o, mono && high);
    worst_ortho = std::min(worst_ortho, sweep[2].cos_alpha);
    if (mono && high) ++ortho_ok;
    else fail(s, "orthogonal net cos=" + detail::fmt_real(sweep[0].cos_alpha) + "," + detail::fmt_real(sweep[1].cos_alpha) + "," +
                 detail::fmt_real(sweep[2].cos_alpha));
  }
  res.summary = "thm1: random cos>0 and above bound in " + std::to_string(random_ok) + "/" + std::to_string(trials) +
                "; top-layer cos=1 in " + std::to_string(gap_ok) + "/" + std::to_string(trials) +
                "; orthogonal monotone and >=0.99 in " + std::to_string(ortho_ok) + "/" + std::to_string(trials) +
                " (worst cos at 1e-4: " + detail::fmt_real(worst_ortho) + ")";
  return res;
}

inline SuiteResult run_thm2_suite(std::uint64_t seed, std::size_t trials, std::size_t directions = 100) {
  SuiteResult res;
  res.name = "thm2";
  res.csv = "seed,case,lambda,target_norm,pass_fraction,pass\n";
  constexpr std::size_t width = 8;
  std::size_t exact_ok = 0, trained_ok = 0;
  double worst_lambda = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = detail::trial_seed(seed, t);
    Rng rng = Rng(s).split("thm2");
    auto emit = [&](std::string_view kind, const Thm2Sweep& sw, bool ok) {
      res.csv += std::to_string(s) + "," + std::string(kind) + "," + detail::fmt_real(sw.lambda) + "," +
                 detail::fmt_real(sw.target_norm) + "," + detail::fmt_real(sw.pass_fraction) + "," + (ok ? "1" : "0") +
                 "\n";
    };

    Rng ex_rng = rng.split("exact");
    const LayerPair exact = exact_linear_pair(width, ex_rng);
    const Thm2Sweep ex = theorem2_sweep(exact, directions, ex_rng, 1e-1, 1e-1, 1.0);
    const bool ex_ok = ex.lambda < 1e-10 && ex.pass_fraction == 1.0;
    emit("exact", ex, ex_ok);
    if (ex_ok) ++exact_ok;
    else {
      res.pass = false;
      res.failures.push_back("seed " + std::to_string(s) + ": exact inverse lambda=" + detail::fmt_real(ex.lambda) +
                             " pass_fraction=" + detail::fmt_real(ex.pass_fraction));
    }

    Rng tr_rng = rng.split("trained");
    const LayerPair trained = trained_tanh_pair(width, tr_rng);
    const Thm2Sweep tr = theorem2_sweep(trained, directions, tr_rng);
    const bool tr_ok = tr.lambda < 1.0 && tr.stabilized;
    emit("trained", tr, tr_ok);
    worst_lambda = std::max(worst_lambda, tr.lambda);
    if (tr_ok) ++trained_ok;
    else {
      res.pass = false;
      res.failures.push_back("seed " + std::to_string(s) + ": trained pair lambda=" + detail::fmt_real(tr.lambda) +
                             " pass_fraction=" + detail::fmt_real(tr.pass_fraction) + " at |e|=" +
                             detail::fmt_real(tr.target_norm));
    }
  }
  res.summary = "thm2: exact inverse 100% pass with lambda<1e-10 in " + std::to_string(exact_ok) + "/" +
                std::to_string(trials) + "; trained pair lambda<1 and >=99% pass in " + std::to_string(trained_ok) + "/" +
                std::to_string(trials) + " (largest lambda " + detail::fmt_real(worst_lambda) + ")";
  return res;
}

inline SuiteResult run_prop2_suite(std::uint64_t seed, std::size_t trials) {
  SuiteResult res;
  res.name = "prop2";
  res.csv = "seed,mode,steps,final_gamma,window_1e3,window_1e4,window_1e5,pass\n";
  std::size_t frozen_ok = 0, joint_ok = 0;
  double worst_final = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t s = detail::trial_seed(seed, t);
    const Rng rng = Rng(s).split("prop2");
    for (const bool joint : {false, true}) {
      Prop2Options opt;
      opt.steps = 110000;  // the last window reaches t = 1.1e5
      opt.eta_w0 = joint ? 1e-3 : 0.0;
      const Prop2Trace tr = prop2_check(opt, rng.split(joint ? "joint" : "frozen"));
      const double w3 = window_mean(tr, 1000, 100);
      const double w4 = window_mean(tr, 10000, 1000);
      const double w5 = window_mean(tr, 100000, 9999);
      const double final_gamma = tr.gammas[100000];
      const bool decreasing = w3 > w4 && w4 > w5;
      const bool ok = joint ? decreasing : decreasing && final_gamma < 1e-4;
      res.csv += std::to_string(s) + "," + (joint ? "joint" : "frozen") + "," + std::to_string(opt.steps) + "," +
                 detail::fmt_real(final_gamma) + "," + detail::fmt_real(w3) + "," + detail::fmt_real(w4) + "," +
                 detail::fmt_real(w5) + "," + (ok ? "1" : "0") + "\n";
      if (!joint) worst_final = std::max(worst_final, final_gamma);
      if (ok) ++(joint ? joint_ok : frozen_ok);
      else {
        res.pass = false;
        res.failures.push_back("seed " + std::to_string(s) + ": " + (joint ? "joint" : "frozen") + " gamma windows " +
                               detail::fmt_real(w3) + " " + detail::fmt_real(w4) + " " + detail::fmt_real(w5) +
                               " final " + detail::fmt_real(final_gamma));
      }
    }
  }
  res.summary = "prop2: frozen W gamma<1e-4 after 1e5 steps in " + std::to_string(frozen_ok) + "/" +
                std::to_string(trials) + " (largest " + detail::fmt_real(worst_final) +
                "); joint window means decreasing in " + std::to_string(joint_ok) + "/" + std::to_string(trials);
  return res;
}

inline SuiteResult run_gradient_suite(std::uint64_t seed, std::size_t trials) {
  SuiteResult res;
  res.name = "gradients";
  res.csv = "check,trials,max_rel_err,pass\n";
  const Rng rng = Rng(seed).split("gradients");
  std::ostringstream summary;
  summary << "gradients:";
  for (AuditTarget target : all_audit_targets()) {
    const AuditEntry e = gradient_audit(target, trials, rng.split(to_string(target)));
    res.csv += e.name + "," + std::to_string(e.trials) + "," + detail::fmt_real(e.max_rel_err) + "," +
               (e.pass() ? "1" : "0") + "\n";
    summary << " " << e.name << "=" << detail::fmt_real(e.max_rel_err);
    if (!e.pass()) {
      res.pass = false;
      res.failures.push_back(e.name + ": max relative error " + detail::fmt_real(e.max_rel_err));
    }
  }
  res.summary = summary.str();
  return res;
}

}  // namespace tprop
