// tprop: train, evaluate and verify target-propagation models.
//
// Exit codes: 0 success, 1 verification failure or internal error,
// 2 usage / configuration error, 3 data error, 4 checkpoint format error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "tprop/tprop.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFail = 1, kUsage = 2, kData = 3, kFormat = 4 };

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> eval_samples;
  std::string out;
  std::string data;
  std::size_t limit = 0;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::size_t eval_samples = 1;
  std::uint64_t seed = 1;
  std::size_t limit = 0;
};

struct VerifyArgs {
  std::string suite = "all";
  std::uint64_t seed = 7;
  std::size_t trials = 100;
  std::string out = ".";
};

struct ExportArgs {
  std::string checkpoint;
  std::string out = "filters.pgm";
  std::uint64_t seed = 1;
};

int cmd_train(const TrainArgs& a) {
  tprop::ExperimentConfig cfg = tprop::load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.eval_samples) cfg.eval_samples = *a.eval_samples;
  if (!a.out.empty()) cfg.out_dir = a.out;
  cfg.validate();
  const fs::path dir = tprop::resolve_data_dir(a.data, cfg.data_dir);
  const tprop::Dataset ds = tprop::load_experiment_data(cfg.experiment, dir);
  tprop::RunOptions opts{cfg.out_dir, a.limit, &std::cerr};
  const tprop::RunResult res = tprop::run_experiment(cfg, ds, opts);
  std::cout << res.final.dump(2) << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  const tprop::Model model = tprop::load_checkpoint(a.checkpoint);
  tprop::Split split;
  if (a.split == "train") split = tprop::Split::train;
  else if (a.split == "valid") split = tprop::Split::valid;
  else if (a.split == "test") split = tprop::Split::test;
  else throw tprop::ConfigError("--split: expected train, valid or test");

  std::size_t inputs = 0;
  if (const auto* net = std::get_if<tprop::NetworkParams>(&model)) inputs = net->forward.front().in();
  else inputs = std::get<tprop::AutoEncoderParams>(model).visible();
  const auto kind = inputs == 3072 ? tprop::Experiment::cifar_mlp : tprop::Experiment::mnist_mlp;
  const tprop::Dataset ds = tprop::load_experiment_data(kind, tprop::resolve_data_dir(a.data, ""));
  if (ds.dim() != inputs) {
    throw tprop::FormatError("checkpoint expects " + std::to_string(inputs) + " inputs, dataset has " +
                             std::to_string(ds.dim()));
  }
  const tprop::SplitIndex idx = tprop::split_index(ds, a.limit);
  if (const auto* net = std::get_if<tprop::NetworkParams>(&model)) {
    if (net->forward.back().out() != static_cast<std::size_t>(ds.num_classes)) {
      throw tprop::FormatError("checkpoint has " + std::to_string(net->forward.back().out()) +
                               " outputs, dataset has " + std::to_string(ds.num_classes) + " classes");
    }
    const tprop::EvalResult r =
        tprop::evaluate(*net, ds, idx.of(split), a.eval_samples, tprop::eval_stream(a.seed, split));
    std::cout << "split " << a.split << " samples " << r.count << " error_rate "
              << tprop::detail::fmt_real(r.error_rate) << " nll " << tprop::detail::fmt_real(r.nll) << "\n";
  } else {
    const double mse = tprop::evaluate_reconstruction(std::get<tprop::AutoEncoderParams>(model), ds, idx.of(split));
    std::cout << "split " << a.split << " samples " << idx.of(split).size() << " reconstruction_mse "
              << tprop::detail::fmt_real(mse) << "\n";
  }
  return kOk;
}

int cmd_verify(const VerifyArgs& a) {
  std::vector<std::string> suites;
  if (a.suite == "all") suites = {"thm1", "thm2", "prop2", "gradients"};
  else if (a.suite == "thm1" || a.suite == "thm2" || a.suite == "prop2" || a.suite == "gradients") suites = {a.suite};
  else throw tprop::ConfigError("--suite: expected thm1, thm2, prop2, gradients or all");
  if (a.trials < 1) throw tprop::ConfigError("--trials must be >= 1");
  fs::create_directories(a.out);
  bool pass = true;
  for (const std::string& s : suites) {
    tprop::SuiteResult r;
    if (s == "thm1") r = tprop::run_thm1_suite(a.seed, a.trials);
    else if (s == "thm2") r = tprop::run_thm2_suite(a.seed, a.trials);
    else if (s == "prop2") r = tprop::run_prop2_suite(a.seed, a.trials);
    else r = tprop::run_gradient_suite(a.seed, a.trials);
    tprop::detail::write_text(fs::path(a.out) / ("verify_" + s + ".csv"), r.csv);
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.summary << "\n";
    for (const auto& f : r.failures) std::cout << "  " << f << "\n";
    pass = pass && r.pass;
  }
  return pass ? kOk : kFail;
}

int cmd_export(const ExportArgs& a) {
  const tprop::Model model = tprop::load_checkpoint(a.checkpoint);
  const auto* ae = std::get_if<tprop::AutoEncoderParams>(&model);
  if (ae == nullptr) throw tprop::FormatError("export-filters: checkpoint is not an auto-encoder");
  if (const fs::path parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  tprop::detail::write_text(a.out, tprop::render_filter_grid(*ae, a.seed));
  std::cout << "wrote " << a.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Difference target propagation: training, evaluation and verification"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model from a JSON experiment config");
  t->add_option("--config", train.config, "Experiment config (JSON)")->required();
  t->add_option("--seed", train.seed, "Override the config seed");
  t->add_option("--epochs", train.epochs, "Override the number of epochs");
  t->add_option("--eval-samples", train.eval_samples, "Passes averaged in the final evaluation of stochastic nets");
  t->add_option("--out", train.out, "Output directory (metrics.csv, final.json, model.tprop)");
  t->add_option("--data", train.data, "Dataset directory (falls back to data_dir, then TPROP_DATA_DIR)");
  t->add_option("--limit", train.limit, "Use at most N samples of each split");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint written by train")->required();
  e->add_option("--data", eval.data, "Dataset directory (falls back to TPROP_DATA_DIR)");
  e->add_option("--split", eval.split, "train, valid or test");
  e->add_option("--eval-samples", eval.eval_samples, "Passes averaged for stochastic nets");
  e->add_option("--seed", eval.seed, "Seed of the sampling stream (stochastic nets)");
  e->add_option("--limit", eval.limit, "Use at most N samples of each split");

  VerifyArgs verify;
  auto* v = app.add_subcommand("verify", "Run numerical verification suites");
  v->add_option("--suite", verify.suite, "thm1, thm2, prop2, gradients or all");
  v->add_option("--seed", verify.seed, "Base seed");
  v->add_option("--trials", verify.trials, "Trials per suite");
  v->add_option("--out", verify.out, "Directory for verify_<suite>.csv");

  ExportArgs exp;
  auto* x = app.add_subcommand("export-filters", "Write a PGM grid of auto-encoder filters");
  x->add_option("--checkpoint", exp.checkpoint, "Auto-encoder checkpoint")->required();
  x->add_option("--out", exp.out, "Output PGM path");
  x->add_option("--seed", exp.seed, "Seed of the unit selection");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (t->parsed()) return cmd_train(train);
    if (e->parsed()) return cmd_eval(eval);
    if (v->parsed()) return cmd_verify(verify);
    if (x->parsed()) return cmd_export(exp);
  } catch (const tprop::ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const tprop::DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  } catch (const tprop::FormatError& err) {
    std::cerr << "format error: " << err.what() << "\n";
    return kFormat;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kFail;
  }
  return kUsage;
}
