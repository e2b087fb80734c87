#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>

#include "tprop/errors.hpp"
#include "tprop/linalg.hpp"
#include "tprop/rng.hpp"

namespace tprop {

enum class Activation { identity, tanh, sigmoid, relu, sign, softmax };

/// How a layer's output travels to the next layer.
///  - real: the activation itself.
///  - discretized: sign(activation), with sign(x) = 1 if x > 0 else 0.
///  - stochastic_binary: a Bernoulli sample with the (sigmoid) activation as
///    its probability.
enum class Transmit { real, discretized, stochastic_binary };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
    case Activation::sign: return "sign";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  for (Activation a : {Activation::identity, Activation::tanh, Activation::sigmoid, Activation::relu,
                       Activation::sign, Activation::softmax}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

inline std::string_view to_string(Transmit t) {
  switch (t) {
    case Transmit::real: return "real";
    case Transmit::discretized: return "discretized";
    case Transmit::stochastic_binary: return "stochastic_binary";
  }
  return "?";
}

inline double step(double x) noexcept { return x > 0.0 ? 1.0 : 0.0; }
inline double logistic(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

inline Matrix sign_step(const Matrix& m) { return m.map(step); }

/// Applies an activation to pre-activations. Softmax normalises each column.
inline Matrix activate(Activation act, const Matrix& pre) {
  switch (act) {
    case Activation::identity: return pre;
    case Activation::tanh: return pre.map([](double x) { return std::tanh(x); });
    case Activation::sigmoid: return pre.map(logistic);
    case Activation::relu: return pre.map([](double x) { return x > 0.0 ? x : 0.0; });
    case Activation::sign: return pre.map(step);
    case Activation::softmax: {
      Matrix out(pre.rows(), pre.cols());
      for (std::size_t c = 0; c < pre.cols(); ++c) {
        double mx = -INFINITY;
        for (std::size_t r = 0; r < pre.rows(); ++r) mx = std::max(mx, pre(r, c));
        double z = 0.0;
        for (std::size_t r = 0; r < pre.rows(); ++r) {
          out(r, c) = std::exp(pre(r, c) - mx);
          z += out(r, c);
        }
        for (std::size_t r = 0; r < pre.rows(); ++r) out(r, c) /= z;
      }
      return out;
    }
  }
  throw ConfigError("activate: unknown activation");
}

/// Element-wise derivative expressed through the activation OUTPUT y.
inline Matrix activation_deriv(Activation act, const Matrix& y) {
  switch (act) {
    case Activation::identity: return Matrix(y.rows(), y.cols(), 1.0);
    case Activation::tanh: return y.map([](double v) { return 1.0 - v * v; });
    case Activation::sigmoid: return y.map([](double v) { return v * (1.0 - v); });
    case Activation::relu: return y.map([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::sign:
      throw UnsupportedError("activation_deriv: sign has no useful derivative; use the straight-through estimator");
    case Activation::softmax:
      throw UnsupportedError("activation_deriv: softmax Jacobian is not element-wise");
  }
  throw ConfigError("activation_deriv: unknown activation");
}

inline Vector activation_deriv(Activation act, const Vector& y) {
  return Vector::from_column(activation_deriv(act, y.as_column()));
}

/// f(x) = s(W x + b), followed by the layer's transmission rule.
struct ForwardLayer {
  Matrix W;  // out x in
  Vector b;  // out
  Activation act = Activation::tanh;
  Transmit transmit = Transmit::real;

  std::size_t in() const noexcept { return W.cols(); }
  std::size_t out() const noexcept { return W.rows(); }

  void validate() const {
    if (b.size() != W.rows()) {
      throw DimensionError("ForwardLayer: bias length " + std::to_string(b.size()) + " vs W " + W.shape());
    }
    if (act == Activation::softmax && transmit != Transmit::real) {
      throw ConfigError("ForwardLayer: softmax output cannot use a discrete transmission");
    }
    if (transmit == Transmit::stochastic_binary && act != Activation::sigmoid) {
      throw ConfigError("ForwardLayer: stochastic binary units need sigmoid probabilities");
    }
  }
};

/// g(h) = s(V h + c); with binarize_input the layer reads sign(h) instead of h.
struct InverseLayer {
  Matrix V;  // in x out of the paired forward layer
  Vector c;
  Activation act = Activation::tanh;
  bool binarize_input = false;

  std::size_t in() const noexcept { return V.cols(); }
  std::size_t out() const noexcept { return V.rows(); }

  void validate() const {
    if (c.size() != V.rows()) {
      throw DimensionError("InverseLayer: bias length " + std::to_string(c.size()) + " vs V " + V.shape());
    }
  }
};

inline Matrix affine(const Matrix& W, const Vector& b, const Matrix& input) {
  if (input.rows() != W.cols()) {
    throw DimensionError("affine: input " + input.shape() + " does not match weights " + W.shape());
  }
  Matrix pre = matmul(W, input);
  add_to_columns(pre, b);
  return pre;
}

inline Matrix bernoulli_sample(const Matrix& prob, Rng& rng) {
  Matrix out(prob.rows(), prob.cols());
  for (std::size_t i = 0; i < prob.size(); ++i) out.data()[i] = rng.bernoulli(prob.data()[i]) ? 1.0 : 0.0;
  return out;
}

/// What a layer hands to the next one (`output`) together with its
/// real-valued activation s(Wx+b). For stochastic layers the activation is
/// the firing probability; for discretized layers it is the pre-sign value.
struct LayerOutput {
  Matrix output;
  Matrix activation;
};

/// Transmission of an activation onto the wire.
inline Matrix transmit(Transmit mode, const Matrix& activation, Rng* rng) {
  switch (mode) {
    case Transmit::real: return activation;
    case Transmit::discretized: return sign_step(activation);
    case Transmit::stochastic_binary:
      if (rng == nullptr) throw ParameterError("transmit: stochastic layer needs an rng");
      return bernoulli_sample(activation, *rng);
  }
  throw ConfigError("transmit: unknown mode");
}

/// Batched forward application; `input` holds one sample per column.
inline LayerOutput forward(const ForwardLayer& layer, const Matrix& input, Rng* rng = nullptr) {
  layer.validate();
  Matrix act = activate(layer.act, affine(layer.W, layer.b, input));
  Matrix out = transmit(layer.transmit, act, rng);
  return {std::move(out), std::move(act)};
}

/// Single-sample forward; `prob` is set only for stochastic layers.
struct SampleOutput {
  Vector output;
  std::optional<Vector> prob;
};

inline SampleOutput forward(const ForwardLayer& layer, const Vector& input, Rng* rng = nullptr) {
  LayerOutput o = forward(layer, input.as_column(), rng);
  SampleOutput s{Vector::from_column(o.output), std::nullopt};
  if (layer.transmit == Transmit::stochastic_binary) s.prob = Vector::from_column(o.activation);
  return s;
}

inline Matrix inverse(const InverseLayer& layer, const Matrix& input) {
  layer.validate();
  if (layer.binarize_input) return activate(layer.act, affine(layer.V, layer.c, sign_step(input)));
  return activate(layer.act, affine(layer.V, layer.c, input));
}

inline Vector inverse(const InverseLayer& layer, const Vector& input) {
  return Vector::from_column(inverse(layer, input.as_column()));
}

}  // namespace tprop
