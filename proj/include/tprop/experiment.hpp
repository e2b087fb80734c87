#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tprop/checkpoint.hpp"
#include "tprop/data.hpp"
#include "tprop/errors.hpp"
#include "tprop/models.hpp"
#include "tprop/optim.hpp"
#include "tprop/rng.hpp"
#include "tprop/tpengine.hpp"
#include "tprop/verify.hpp"

namespace tprop {

enum class Experiment { mnist_mlp, mnist_relu, cifar_mlp, discrete, stochastic, autoencoder };
enum class Method { dtp, vanilla_tp, backprop, straight_through, frozen_lower };

inline constexpr std::pair<Experiment, std::string_view> kExperimentNames[] = {
    {Experiment::mnist_mlp, "mnist_mlp"},   {Experiment::mnist_relu, "mnist_relu"},
    {Experiment::cifar_mlp, "cifar_mlp"},   {Experiment::discrete, "discrete"},
    {Experiment::stochastic, "stochastic"}, {Experiment::autoencoder, "autoencoder"}};

inline constexpr std::pair<Method, std::string_view> kMethodNames[] = {{Method::dtp, "dtp"},
                                                                       {Method::vanilla_tp, "vanilla_tp"},
                                                                       {Method::backprop, "backprop"},
                                                                       {Method::straight_through, "straight_through"},
                                                                       {Method::frozen_lower, "frozen_lower"}};

inline std::string_view to_string(Experiment e) {
  for (const auto& [k, v] : kExperimentNames)
    if (k == e) return v;
  return "?";
}

inline std::string_view to_string(Method m) {
  for (const auto& [k, v] : kMethodNames)
    if (k == m) return v;
  return "?";
}

inline Experiment parse_experiment(std::string_view s) {
  for (const auto& [k, v] : kExperimentNames)
    if (v == s) return k;
  throw ConfigError("experiment: unknown value '" + std::string(s) + "'");
}

inline Method parse_method(std::string_view s) {
  for (const auto& [k, v] : kMethodNames)
    if (v == s) return k;
  throw ConfigError("method: unknown value '" + std::string(s) + "'");
}

struct OptimizerSection {
  OptimizerKind kind = OptimizerKind::rmsprop;
  double lr_forward = 1e-3;
  double lr_inverse = 3e-4;
  double rho = 0.9;
  double eps = 1e-8;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::mnist_mlp;
  Method method = Method::dtp;
  std::size_t hidden_layers = 7;
  std::size_t width = 240;
  Activation activation = Activation::tanh;
  Activation inverse_activation = Activation::tanh;
  std::size_t epochs = 30;
  std::size_t batch_size = 100;
  std::uint64_t seed = 1;
  double eta_hat = 0.5;   // step of the output target; used by the verification suites
  double eta_tilde = 0.1; // step of the top hidden target during training
  OptimizerSection optimizer;
  std::map<std::size_t, double> layer_lr_forward;  // 1-based layer -> lr
  std::map<std::size_t, double> layer_lr_inverse;
  NoiseSchedule noise{0.1, 10.0};
  std::string data_dir;
  std::string out_dir = "out";
  std::size_t eval_samples = 100;   // stochastic nets: passes averaged for the final evaluation
  std::size_t monitor_samples = 1;  // stochastic nets: passes averaged for per-epoch valid/test errors
  std::size_t freeze_below = 2;     // frozen_lower: layers below this (1-based) stay at their initial values
  double init_gain = 1.0;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  bool classification() const noexcept { return experiment != Experiment::autoencoder; }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be > 0");
    };
    if (hidden_layers < 1) throw ConfigError("hidden_layers must be >= 1");
    if (width < 1) throw ConfigError("width must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
    if (monitor_samples < 1) throw ConfigError("monitor_samples must be >= 1");
    positive(eta_hat, "eta_hat");
    positive(eta_tilde, "eta_tilde");
    positive(optimizer.lr_forward, "optimizer.lr_forward");
    positive(optimizer.lr_inverse, "optimizer.lr_inverse");
    positive(optimizer.eps, "optimizer.eps");
    positive(init_gain, "init_gain");
    if (!(optimizer.rho >= 0.0 && optimizer.rho < 1.0)) throw ConfigError("optimizer.rho must lie in [0, 1)");
    for (const auto& [k, v] : layer_lr_forward) positive(v, "layer_lr.forward");
    for (const auto& [k, v] : layer_lr_inverse) positive(v, "layer_lr.inverse");
    noise.validate();
    if (activation == Activation::sign || activation == Activation::softmax) {
      throw ConfigError("activation must be element-wise differentiable");
    }
    if (inverse_activation == Activation::sign || inverse_activation == Activation::softmax) {
      throw ConfigError("inverse_activation must be element-wise differentiable");
    }

    const bool mlp = experiment == Experiment::mnist_mlp || experiment == Experiment::mnist_relu ||
                     experiment == Experiment::cifar_mlp;
    bool ok = false;
    switch (method) {
      case Method::dtp: ok = true; break;
      case Method::vanilla_tp: ok = mlp; break;
      case Method::backprop: ok = mlp; break;
      case Method::straight_through: ok = experiment == Experiment::discrete || experiment == Experiment::stochastic; break;
      case Method::frozen_lower: ok = experiment == Experiment::discrete; break;
    }
    if (!ok) {
      throw ConfigError("method: '" + std::string(to_string(method)) + "' is not available for experiment '" +
                        std::string(to_string(experiment)) + "'");
    }
    if (experiment == Experiment::mnist_relu && activation != Activation::relu) {
      throw ConfigError("activation: mnist_relu requires relu");
    }
    if (method == Method::frozen_lower && (freeze_below < 2 || freeze_below > 3)) {
      throw ConfigError("freeze_below must be 2 or 3 for the three-layer discrete net");
    }
    if (!layer_lr_inverse.empty() && method != Method::dtp && method != Method::vanilla_tp) {
      throw ConfigError("layer_lr.inverse: method has no feedback mappings");
    }
  }
};

/// Defaults for each experiment family before a config file is applied.
inline ExperimentConfig default_config(Experiment e) {
  ExperimentConfig c;
  c.experiment = e;
  switch (e) {
    case Experiment::mnist_mlp: break;
    case Experiment::mnist_relu:
      c.activation = c.inverse_activation = Activation::relu;
      break;
    case Experiment::cifar_mlp:
      c.hidden_layers = 3;
      c.width = 1000;
      break;
    case Experiment::discrete:
      c.hidden_layers = 2;
      c.width = 500;
      c.epochs = 20;
      break;
    case Experiment::stochastic:
      c.hidden_layers = 2;
      c.width = 200;
      c.activation = Activation::sigmoid;
      c.monitor_samples = 10;
      break;
    case Experiment::autoencoder:
      c.hidden_layers = 1;
      c.width = 1000;
      c.activation = Activation::sigmoid;
      c.epochs = 20;
      break;
  }
  return c;
}

namespace detail {

using json = nlohmann::ordered_json;

inline void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  for (const auto& item : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw ConfigError(where + item.key() + ": unknown key");
    }
  }
}

inline double get_real(const json& j, const std::string& field) {
  if (!j.is_number()) throw ConfigError(field + ": expected a number");
  return j.get<double>();
}

inline std::size_t get_count(const json& j, const std::string& field) {
  if (!j.is_number_unsigned()) throw ConfigError(field + ": expected a non-negative integer");
  return j.get<std::size_t>();
}

inline std::string get_string(const json& j, const std::string& field) {
  if (!j.is_string()) throw ConfigError(field + ": expected a string");
  return j.get<std::string>();
}

inline std::map<std::size_t, double> get_layer_map(const json& j, const std::string& field) {
  if (!j.is_object()) throw ConfigError(field + ": expected an object keyed by layer index");
  std::map<std::size_t, double> out;
  for (const auto& item : j.items()) {
    std::size_t layer = 0;
    try {
      std::size_t pos = 0;
      layer = std::stoul(item.key(), &pos);
      if (pos != item.key().size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError(field + "." + item.key() + ": key must be a layer index");
    }
    out[layer] = get_real(item.value(), field + "." + item.key());
  }
  return out;
}

}  // namespace detail

/// Strict parse: unknown keys and wrongly typed values are rejected with the
/// offending field name.
inline ExperimentConfig parse_config(const nlohmann::ordered_json& j) {
  using detail::get_count;
  using detail::get_real;
  using detail::get_string;
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::reject_unknown(j,
                         {"experiment", "method", "hidden_layers", "width", "activation", "inverse_activation", "epochs",
                          "batch_size", "seed", "eta_hat", "eta_tilde", "optimizer", "layer_lr", "noise", "data_dir",
                          "out_dir", "eval_samples", "monitor_samples", "freeze_below", "init_gain", "provenance"},
                         "");
  if (!j.contains("experiment")) throw ConfigError("experiment: required");
  ExperimentConfig c = default_config(parse_experiment(get_string(j["experiment"], "experiment")));
  auto activation = [](const nlohmann::ordered_json& v, const char* field) {
    const std::string name = get_string(v, field);
    try {
      return parse_activation(name);
    } catch (const Error& e) {
      throw ConfigError(std::string(field) + ": " + e.what());
    }
  };
  if (j.contains("method")) c.method = parse_method(get_string(j["method"], "method"));
  if (j.contains("hidden_layers")) c.hidden_layers = get_count(j["hidden_layers"], "hidden_layers");
  if (j.contains("width")) c.width = get_count(j["width"], "width");
  if (j.contains("activation")) {
    c.activation = activation(j["activation"], "activation");
    if (!j.contains("inverse_activation") && c.experiment != Experiment::stochastic) c.inverse_activation = c.activation;
  }
  if (j.contains("inverse_activation")) c.inverse_activation = activation(j["inverse_activation"], "inverse_activation");
  if (j.contains("epochs")) c.epochs = get_count(j["epochs"], "epochs");
  if (j.contains("batch_size")) c.batch_size = get_count(j["batch_size"], "batch_size");
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ConfigError("seed: expected a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("eta_hat")) c.eta_hat = get_real(j["eta_hat"], "eta_hat");
  if (j.contains("eta_tilde")) c.eta_tilde = get_real(j["eta_tilde"], "eta_tilde");
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    if (!o.is_object()) throw ConfigError("optimizer: expected an object");
    detail::reject_unknown(o, {"kind", "lr_forward", "lr_inverse", "rho", "eps"}, "optimizer.");
    if (o.contains("kind")) {
      const std::string k = get_string(o["kind"], "optimizer.kind");
      if (k == "rmsprop") c.optimizer.kind = OptimizerKind::rmsprop;
      else if (k == "sgd") c.optimizer.kind = OptimizerKind::sgd;
      else throw ConfigError("optimizer.kind: unknown value '" + k + "'");
    }
    if (o.contains("lr_forward")) c.optimizer.lr_forward = get_real(o["lr_forward"], "optimizer.lr_forward");
    if (o.contains("lr_inverse")) c.optimizer.lr_inverse = get_real(o["lr_inverse"], "optimizer.lr_inverse");
    if (o.contains("rho")) c.optimizer.rho = get_real(o["rho"], "optimizer.rho");
    if (o.contains("eps")) c.optimizer.eps = get_real(o["eps"], "optimizer.eps");
  }
  if (j.contains("layer_lr")) {
    const auto& l = j["layer_lr"];
    if (!l.is_object()) throw ConfigError("layer_lr: expected an object");
    detail::reject_unknown(l, {"forward", "inverse"}, "layer_lr.");
    if (l.contains("forward")) c.layer_lr_forward = detail::get_layer_map(l["forward"], "layer_lr.forward");
    if (l.contains("inverse")) c.layer_lr_inverse = detail::get_layer_map(l["inverse"], "layer_lr.inverse");
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    if (!n.is_object()) throw ConfigError("noise: expected an object");
    detail::reject_unknown(n, {"sigma0", "e0"}, "noise.");
    if (n.contains("sigma0")) c.noise.sigma0 = get_real(n["sigma0"], "noise.sigma0");
    if (n.contains("e0")) c.noise.e0 = get_real(n["e0"], "noise.e0");
  }
  if (j.contains("data_dir")) c.data_dir = get_string(j["data_dir"], "data_dir");
  if (j.contains("out_dir")) c.out_dir = get_string(j["out_dir"], "out_dir");
  if (j.contains("eval_samples")) c.eval_samples = get_count(j["eval_samples"], "eval_samples");
  if (j.contains("monitor_samples")) c.monitor_samples = get_count(j["monitor_samples"], "monitor_samples");
  if (j.contains("freeze_below")) c.freeze_below = get_count(j["freeze_below"], "freeze_below");
  if (j.contains("init_gain")) c.init_gain = get_real(j["init_gain"], "init_gain");
  if (j.contains("provenance")) {
    if (!j["provenance"].is_object()) throw ConfigError("provenance: expected an object");
    c.provenance = j["provenance"];
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Data

/// Sample indices of each split, optionally truncated to the first `limit`.
struct SplitIndex {
  std::vector<std::size_t> train, valid, test;

  const std::vector<std::size_t>& of(Split s) const {
    return s == Split::train ? train : (s == Split::valid ? valid : test);
  }
};

inline SplitIndex split_index(const Dataset& ds, std::size_t limit = 0) {
  SplitIndex s{ds.indices(Split::train), ds.indices(Split::valid), ds.indices(Split::test)};
  if (limit > 0) {
    for (auto* v : {&s.train, &s.valid, &s.test})
      if (v->size() > limit) v->resize(limit);
  }
  return s;
}

/// --data flag, then the config's data_dir, then $TPROP_DATA_DIR.
inline std::filesystem::path resolve_data_dir(const std::string& flag, const std::string& config_dir) {
  if (!flag.empty()) return flag;
  if (!config_dir.empty()) return config_dir;
  if (const char* env = std::getenv("TPROP_DATA_DIR"); env != nullptr && *env != '\0') return env;
  throw DataError("no data directory: pass --data, set data_dir in the config, or set TPROP_DATA_DIR");
}

inline Dataset load_experiment_data(Experiment e, const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("data directory " + dir.string() + " does not exist");
  return e == Experiment::cifar_mlp ? load_cifar10(dir) : load_mnist(dir);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double error_rate = 0.0;
  double nll = 0.0;
  std::size_t count = 0;
};

/// Error rate and mean negative log-likelihood over `idx`; stochastic nets
/// average `samples` passes before the argmax.
inline EvalResult evaluate(const NetworkParams& net, const Dataset& ds, std::span<const std::size_t> idx,
                           std::size_t samples, Rng rng, std::size_t chunk = 1000) {
  EvalResult r;
  r.count = idx.size();
  if (idx.empty()) return r;
  std::size_t errors = 0;
  double nll = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const auto part = idx.subspan(start, std::min(chunk, idx.size() - start));
    const Batch b = gather_batch(ds, part);
    const Matrix p = predict_proba(net, b.x, samples, rng);
    errors += count_errors(p, b.labels);
    for (std::size_t c = 0; c < p.cols(); ++c) {
      nll -= std::log(std::max(p(static_cast<std::size_t>(b.labels[c]), c), kLogFloor));
    }
  }
  r.error_rate = static_cast<double>(errors) / static_cast<double>(idx.size());
  r.nll = nll / static_cast<double>(idx.size());
  return r;
}

/// Mean squared reconstruction error per pixel over `idx`.
inline double evaluate_reconstruction(const AutoEncoderParams& ae, const Dataset& ds, std::span<const std::size_t> idx,
                                      std::size_t chunk = 1000) {
  if (idx.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const auto part = idx.subspan(start, std::min(chunk, idx.size() - start));
    const Batch b = gather_batch(ds, part);
    total += reconstruction_mse(ae, b.x) * static_cast<double>(b.x.size());
  }
  return total / static_cast<double>(idx.size() * ds.dim());
}

/// Stream used to evaluate a split; shared by training and `eval` so a
/// freshly written checkpoint reproduces the logged numbers.
inline Rng eval_stream(std::uint64_t seed, Split s) { return Rng(seed).split("eval").split(to_string(s)); }

// ---------------------------------------------------------------------------
// Metrics

/// Named columns of per-epoch numbers. Written with 17 significant digits so
/// repeated runs produce identical bytes.
struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw ParameterError("metrics: no column '" + std::string(name) + "'");
  }
  double at(std::size_t row, std::string_view name) const { return rows.at(row).at(index(name)); }
  std::vector<double> column(std::string_view name) const {
    const std::size_t k = index(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[k]);
    return out;
  }
  std::string header() const {
    std::string s;
    for (std::size_t i = 0; i < columns.size(); ++i) s += (i ? "," : "") + columns[i];
    return s + "\n";
  }
  static std::string format_row(const std::vector<double>& r) {
    std::string s;
    for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + detail::fmt_real(r[i]);
    return s + "\n";
  }
  std::string to_csv() const {
    std::string s = header();
    for (const auto& r : rows) s += format_row(r);
    return s;
  }
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::size_t limit = 0;          // truncate each split to this many samples (0 = all)
  std::ostream* log = nullptr;    // one progress line per epoch
};

struct RunResult {
  MetricsTable metrics;
  nlohmann::ordered_json final;
  Model model;
  std::vector<double> wall_seconds;
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline NetworkParams build_network(const ExperimentConfig& cfg, std::size_t inputs, std::size_t classes, Rng& rng) {
  switch (cfg.experiment) {
    case Experiment::discrete: return build_discrete_net(rng, inputs, cfg.width, classes, cfg.init_gain);
    case Experiment::stochastic: {
      NetworkParams net = build_stochastic_net(rng, inputs, cfg.width, classes, cfg.init_gain);
      net.g(2).act = cfg.inverse_activation;
      return net;
    }
    default: {
      NetworkParams net = build_mlp(inputs, cfg.hidden_layers, cfg.width, classes, cfg.activation, rng, cfg.init_gain);
      for (auto& g : net.inverse) g.act = cfg.inverse_activation;
      return net;
    }
  }
}

inline NetworkOptimizer make_optimizer(const ExperimentConfig& cfg, const NetworkParams& net) {
  const OptimizerConfig fwd{cfg.optimizer.kind, cfg.optimizer.lr_forward, cfg.optimizer.rho, cfg.optimizer.eps};
  const OptimizerConfig inv{cfg.optimizer.kind, cfg.optimizer.lr_inverse, cfg.optimizer.rho, cfg.optimizer.eps};
  NetworkOptimizer opt = NetworkOptimizer::make(net, fwd, inv);
  for (const auto& [layer, lr] : cfg.layer_lr_forward) {
    if (layer < 1 || layer > net.depth()) {
      throw ConfigError("layer_lr.forward." + std::to_string(layer) + ": no such layer");
    }
    opt.forward_cfg[layer - 1].lr = lr;
  }
  for (const auto& [layer, lr] : cfg.layer_lr_inverse) {
    if (layer < 2 || layer + 1 > net.depth()) {
      throw ConfigError("layer_lr.inverse." + std::to_string(layer) + ": no feedback mapping g_" + std::to_string(layer));
    }
    opt.inverse_cfg[layer - 2].lr = lr;
  }
  return opt;
}

class RunFiles {
 public:
  explicit RunFiles(const std::filesystem::path& dir) : dir_(dir) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_);
    metrics_.open(dir_ / "metrics.csv", std::ios::binary | std::ios::trunc);
    timing_.open(dir_ / "timing.csv", std::ios::binary | std::ios::trunc);
    if (!metrics_ || !timing_) throw Error("cannot write into " + dir_.string());
    timing_ << "epoch,wall_seconds\n";
  }
  void header(const MetricsTable& t) {
    if (!dir_.empty()) metrics_ << t.header() << std::flush;
  }
  void row(const std::vector<double>& r, std::size_t epoch, double seconds) {
    if (dir_.empty()) return;
    metrics_ << MetricsTable::format_row(r) << std::flush;
    timing_ << epoch << "," << detail::fmt_real(seconds) << "\n" << std::flush;
  }
  void finish(const nlohmann::ordered_json& final, const Model& model) {
    if (dir_.empty()) return;
    write_text(dir_ / "final.json", final.dump(2) + "\n");
    save_checkpoint(dir_ / "model.tprop", model);
  }

 private:
  std::filesystem::path dir_;
  std::ofstream metrics_, timing_;
};

inline RunResult run_classifier(const ExperimentConfig& cfg, const Dataset& ds, const RunOptions& opts) {
  const SplitIndex split = split_index(ds, opts.limit);
  if (split.train.empty()) throw DataError("training split is empty");
  const Rng root(cfg.seed);
  Rng init_rng = root.split("init");
  const Rng shuffle_rng = root.split("shuffle");
  Rng step_rng = root.split("step");

  NetworkParams net = build_network(cfg, ds.dim(), static_cast<std::size_t>(ds.num_classes), init_rng);
  NetworkOptimizer opt = make_optimizer(cfg, net);
  const bool target_prop = cfg.method == Method::dtp || cfg.method == Method::vanilla_tp;
  const DtpStepConfig step_cfg{LossKind::cross_entropy, cfg.eta_tilde,
                               cfg.method == Method::vanilla_tp ? TargetRule::vanilla : TargetRule::difference};
  GradientMethod grad_method = GradientMethod::backprop;
  if (cfg.method == Method::straight_through) grad_method = GradientMethod::straight_through;
  if (cfg.method == Method::frozen_lower) grad_method = GradientMethod::frozen_lower;

  RunResult res;
  res.metrics.columns = {"epoch", "train_loss", "train_nll", "train_err", "valid_err", "test_err", "sigma"};
  if (target_prop) {
    for (std::size_t i = 2; i + 1 <= net.depth(); ++i) res.metrics.columns.push_back("inv_loss_" + std::to_string(i));
  }
  RunFiles files(opts.out_dir);
  files.header(res.metrics);

  const std::size_t monitor = net.stochastic() ? cfg.monitor_samples : 1;
  std::size_t best_epoch = 0;
  double best_valid = std::numeric_limits<double>::infinity();
  double test_at_best = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double sigma = noise_sigma(cfg.noise, epoch);
    Rng order = shuffle_rng.split(epoch);
    const auto batches = shuffled_batches(split.train, cfg.batch_size, order);
    double loss_sum = 0.0;
    std::vector<double> inv_sum(net.inverse.size(), 0.0);
    for (const auto& idx : batches) {
      const Batch b = gather_batch(ds, idx);
      StepMetrics m = target_prop ? dtp_train_step(net, b.x, b.y, step_cfg, opt, sigma, step_rng)
                                  : gradient_train_step(net, b.x, b.y, LossKind::cross_entropy, grad_method,
                                                        cfg.freeze_below, opt, step_rng);
      const double w = static_cast<double>(idx.size());
      loss_sum += m.global_loss * w;
      for (std::size_t k = 0; k < m.inverse_losses.size(); ++k) inv_sum[k] += m.inverse_losses[k] * w;
    }
    const double n_train = static_cast<double>(split.train.size());
    const EvalResult tr = evaluate(net, ds, split.train, 1, eval_stream(cfg.seed, Split::train));
    const EvalResult va = evaluate(net, ds, split.valid, monitor, eval_stream(cfg.seed, Split::valid));
    const EvalResult te = evaluate(net, ds, split.test, monitor, eval_stream(cfg.seed, Split::test));
    std::vector<double> row = {static_cast<double>(epoch + 1), loss_sum / n_train, tr.nll, tr.error_rate,
                               va.error_rate, te.error_rate, sigma};
    if (target_prop)
      for (double v : inv_sum) row.push_back(v / n_train);
    if (!split.valid.empty() && va.error_rate < best_valid) {
      best_valid = va.error_rate;
      best_epoch = epoch + 1;
      test_at_best = te.error_rate;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.rows.push_back(row);
    res.wall_seconds.push_back(seconds);
    files.row(row, epoch + 1, seconds);
    if (opts.log) {
      *opts.log << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << row[1] << " train_err " << tr.error_rate
                << " valid_err " << va.error_rate << " test_err " << te.error_rate << " (" << seconds << " s)\n"
                << std::flush;
    }
  }

  const auto& last = res.metrics.rows.back();
  auto& f = res.final;
  f["experiment"] = std::string(to_string(cfg.experiment));
  f["method"] = std::string(to_string(cfg.method));
  f["seed"] = cfg.seed;
  f["epochs"] = cfg.epochs;
  f["best_epoch"] = best_epoch;
  f["best_valid_err"] = split.valid.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(best_valid);
  f["test_err_at_best_valid"] = split.valid.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(test_at_best);
  f["final_train_err"] = last[res.metrics.index("train_err")];
  f["final_train_nll"] = last[res.metrics.index("train_nll")];
  if (net.stochastic()) {
    const EvalResult te = evaluate(net, ds, split.test, cfg.eval_samples, eval_stream(cfg.seed, Split::test));
    f["eval_samples"] = cfg.eval_samples;
    f["final_test_err"] = te.error_rate;
    f["final_test_nll"] = te.nll;
  } else {
    f["final_test_err"] = last[res.metrics.index("test_err")];
  }
  res.model = std::move(net);
  files.finish(f, res.model);
  return res;
}

inline RunResult run_autoencoder(const ExperimentConfig& cfg, const Dataset& ds, const RunOptions& opts) {
  const SplitIndex split = split_index(ds, opts.limit);
  if (split.train.empty()) throw DataError("training split is empty");
  const Rng root(cfg.seed);
  Rng init_rng = root.split("init");
  const Rng shuffle_rng = root.split("shuffle");
  Rng step_rng = root.split("step");

  AutoEncoderParams ae = build_autoencoder(ds.dim(), cfg.width, init_rng, cfg.init_gain);
  AutoEncoderOptimizer opt{{cfg.optimizer.kind, cfg.optimizer.lr_forward, cfg.optimizer.rho, cfg.optimizer.eps}, {}, {}, {}};
  opt.cfg.validate();

  RunResult res;
  res.metrics.columns = {"epoch", "train_loss", "encoder_loss", "train_mse", "valid_mse", "test_mse", "sigma"};
  RunFiles files(opts.out_dir);
  files.header(res.metrics);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double sigma = noise_sigma(cfg.noise, epoch);
    Rng order = shuffle_rng.split(epoch);
    double dec = 0.0, enc = 0.0;
    for (const auto& idx : shuffled_batches(split.train, cfg.batch_size, order)) {
      const Batch b = gather_batch(ds, idx);
      const AutoEncoderMetrics m = dtp_autoencoder_step(ae, b.x, sigma, opt, step_rng);
      dec += m.decoder_loss * static_cast<double>(idx.size());
      enc += m.encoder_loss * static_cast<double>(idx.size());
    }
    const double n_train = static_cast<double>(split.train.size());
    const std::vector<double> row = {static_cast<double>(epoch + 1),
                                     dec / n_train,
                                     enc / n_train,
                                     evaluate_reconstruction(ae, ds, split.train),
                                     evaluate_reconstruction(ae, ds, split.valid),
                                     evaluate_reconstruction(ae, ds, split.test),
                                     sigma};
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.rows.push_back(row);
    res.wall_seconds.push_back(seconds);
    files.row(row, epoch + 1, seconds);
    if (opts.log) {
      *opts.log << "epoch " << epoch + 1 << "/" << cfg.epochs << " decoder_loss " << row[1] << " train_mse " << row[3]
                << " test_mse " << row[5] << " (" << seconds << " s)\n"
                << std::flush;
    }
  }
  const auto& last = res.metrics.rows.back();
  auto& f = res.final;
  f["experiment"] = "autoencoder";
  f["method"] = std::string(to_string(cfg.method));
  f["seed"] = cfg.seed;
  f["epochs"] = cfg.epochs;
  f["final_train_mse"] = last[3];
  f["final_valid_mse"] = last[4];
  f["final_test_mse"] = last[5];
  res.model = std::move(ae);
  files.finish(f, res.model);
  return res;
}

}  // namespace detail

/// Trains the configured model on an already loaded dataset. With an output
/// directory, writes metrics.csv, timing.csv, final.json and model.tprop.
inline RunResult run_experiment(const ExperimentConfig& cfg, const Dataset& ds, const RunOptions& opts = {}) {
  cfg.validate();
  if (ds.num_classes <= 0 || ds.labels.size() != ds.size()) throw DataError("dataset has no class labels");
  return cfg.classification() ? detail::run_classifier(cfg, ds, opts) : detail::run_autoencoder(cfg, ds, opts);
}

// ---------------------------------------------------------------------------
// Filter export

/// 10 x 10 grid of 28 x 28 tiles (a binary PGM, "P5 280 280 255") showing the
/// weights of up to 100 hidden units chosen by a seeded shuffle. Each tile is
/// min-max normalised on its own; a constant tile renders as 128. Missing
/// tiles (fewer than 100 units) stay black.
inline std::string render_filter_grid(const AutoEncoderParams& ae, std::uint64_t seed) {
  constexpr std::size_t side = 28, grid = 10;
  if (ae.visible() != side * side) {
    throw FormatError("export-filters: expected 784 visible units, checkpoint has " + std::to_string(ae.visible()));
  }
  std::vector<std::size_t> units(ae.hidden());
  for (std::size_t i = 0; i < units.size(); ++i) units[i] = i;
  Rng rng = Rng(seed).split("filters");
  const std::size_t take = std::min<std::size_t>(grid * grid, units.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(units[i], units[i + rng.uniform_index(units.size() - i)]);
  }
  constexpr std::size_t W = side * grid;
  std::vector<unsigned char> pix(W * W, 0);
  for (std::size_t t = 0; t < take; ++t) {
    const auto w = ae.W.row(units[t]);
    const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
    const double range = *hi - *lo;
    const std::size_t r0 = (t / grid) * side, c0 = (t % grid) * side;
    for (std::size_t p = 0; p < side * side; ++p) {
      const double v = range > 0.0 ? std::round(255.0 * (w[p] - *lo) / range) : 128.0;
      pix[(r0 + p / side) * W + c0 + p % side] = static_cast<unsigned char>(v);
    }
  }
  std::string out = "P5 280 280 255\n";
  out.append(pix.begin(), pix.end());
  return out;
}

}  // namespace tprop
