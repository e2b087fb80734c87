#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tprop/errors.hpp"
#include "tprop/linalg.hpp"

namespace tprop {

enum class OptimizerKind { sgd, rmsprop };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "rmsprop"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::rmsprop;
  double lr = 1e-3;
  double rho = 0.9;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("optimizer lr must be > 0");
    if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("optimizer rho must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer eps must be > 0");
  }
};

/// Running average of squared gradients for one parameter tensor. Empty until
/// the first RMSprop step.
struct OptimizerState {
  std::vector<double> accum;
};

/// In-place update of `param` from `grad`:
///   sgd:     theta -= lr * g
///   rmsprop: r = rho r + (1 - rho) g^2;  theta -= lr * g / (sqrt(r) + eps)
inline void step(const OptimizerConfig& cfg, OptimizerState& state, std::span<double> param,
                 std::span<const double> grad) {
  if (param.size() != grad.size()) {
    throw DimensionError("optimizer step: parameter size " + std::to_string(param.size()) + " vs gradient size " +
                         std::to_string(grad.size()));
  }
  if (cfg.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < param.size(); ++i) param[i] -= cfg.lr * grad[i];
    return;
  }
  if (state.accum.empty()) state.accum.assign(param.size(), 0.0);
  if (state.accum.size() != param.size()) throw DimensionError("optimizer step: state does not match parameter");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    double& r = state.accum[i];
    r = cfg.rho * r + (1.0 - cfg.rho) * g * g;
    param[i] -= cfg.lr * g / (std::sqrt(r) + cfg.eps);
  }
}

inline void step(const OptimizerConfig& cfg, OptimizerState& state, Matrix& param, const Matrix& grad) {
  if (!param.same_shape(grad)) throw DimensionError("optimizer step: " + param.shape() + " vs " + grad.shape());
  step(cfg, state, param.data(), grad.data());
}

inline void step(const OptimizerConfig& cfg, OptimizerState& state, Vector& param, const Vector& grad) {
  step(cfg, state, param.data(), grad.data());
}

/// Optimizer state for a weight/bias pair.
struct LayerOptState {
  OptimizerState weight;
  OptimizerState bias;
};

}  // namespace tprop
