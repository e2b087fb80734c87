#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tprop/experiment.hpp"

using namespace tprop;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

const fs::path kMnist = fs::path(TPROP_FIXTURES) / "mnist_small";

std::string config_error(const json& j) {
  try {
    parse_config(j).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "<accepted>";
}

ExperimentConfig tiny(Experiment e, Method m) {
  ExperimentConfig c = default_config(e);
  c.method = m;
  c.hidden_layers = e == Experiment::mnist_mlp ? 3 : c.hidden_layers;
  c.width = 16;
  c.epochs = 2;
  c.batch_size = 10;
  c.seed = 4;
  c.eval_samples = 3;
  c.monitor_samples = 2;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Config, MinimalConfigTakesDefaults) {
  const ExperimentConfig c = parse_config(json{{"experiment", "mnist_mlp"}});
  EXPECT_EQ(c.method, Method::dtp);
  EXPECT_EQ(c.hidden_layers, 7u);
  EXPECT_EQ(c.width, 240u);
  EXPECT_EQ(c.optimizer.lr_forward, 1e-3);
  EXPECT_EQ(c.optimizer.lr_inverse, 3e-4);
  EXPECT_EQ(c.optimizer.rho, 0.9);
  EXPECT_EQ(c.optimizer.eps, 1e-8);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"widht", 5}}).find("widht"), std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"width", "wide"}}).find("width"), std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"epochs", -1}}).find("epochs"), std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"optimizer", {{"lr", 0.1}}}}).find("optimizer.lr"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"optimizer", {{"rho", 1.5}}}}).find("optimizer.rho"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"noise", {{"e0", 0}}}}).find("noise.e0"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"activation", "tanhh"}}).find("activation"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"layer_lr", {{"forward", {{"x", 1.0}}}}}})
                .find("layer_lr.forward.x"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"method", "dtp"}}).find("experiment"), std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"eta_tilde", 0.0}}).find("eta_tilde"), std::string::npos);
}

TEST(Config, MethodCompatibility) {
  EXPECT_NE(config_error(json{{"experiment", "mnist_mlp"}, {"method", "frozen_lower"}}).find("method"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "discrete"}, {"method", "backprop"}}).find("method"), std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "stochastic"}, {"method", "frozen_lower"}}).find("method"),
            std::string::npos);
  EXPECT_EQ(config_error(json{{"experiment", "discrete"}, {"method", "straight_through"}}), "<accepted>");
  EXPECT_EQ(config_error(json{{"experiment", "discrete"}, {"method", "frozen_lower"}}), "<accepted>");
  EXPECT_EQ(config_error(json{{"experiment", "stochastic"}, {"method", "straight_through"}}), "<accepted>");
  EXPECT_EQ(config_error(json{{"experiment", "cifar_mlp"}, {"method", "backprop"}}), "<accepted>");
  EXPECT_NE(config_error(json{{"experiment", "discrete"}, {"method", "frozen_lower"}, {"freeze_below", 1}})
                .find("freeze_below"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"experiment", "mnist_relu"}, {"activation", "tanh"}}).find("relu"), std::string::npos);
}

TEST(Config, EveryPresetParses) {
  std::size_t count = 0;
  for (const auto& e : fs::directory_iterator(TPROP_PRESETS)) {
    if (e.path().extension() != ".json") continue;
    SCOPED_TRACE(e.path().string());
    const ExperimentConfig c = load_config(e.path());
    EXPECT_NO_THROW(c.validate());
    EXPECT_TRUE(c.provenance.is_object());
    ++count;
  }
  EXPECT_GE(count, 6u);
}

TEST(Config, InvalidJsonIsAConfigError) {
  const fs::path p = fs::temp_directory_path() / "tprop_bad_config.json";
  std::ofstream(p) << "{ \"experiment\": ";
  EXPECT_THROW((void)load_config(p), ConfigError);
  fs::remove(p);
  EXPECT_THROW((void)load_config(p), ConfigError);
}

TEST(Run, FixtureRunWritesDeterministicFiles) {
  const Dataset ds = load_mnist(kMnist);
  const ExperimentConfig cfg = tiny(Experiment::mnist_mlp, Method::dtp);
  const fs::path a = fs::temp_directory_path() / "tprop_run_a", b = fs::temp_directory_path() / "tprop_run_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const RunResult ra = run_experiment(cfg, ds, RunOptions{a, 0, nullptr});
  const RunResult rb = run_experiment(cfg, ds, RunOptions{b, 0, nullptr});
  for (const char* f : {"metrics.csv", "final.json", "model.tprop"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_TRUE(fs::exists(a / "timing.csv"));
  EXPECT_EQ(ra.metrics.rows.size(), 2u);
  EXPECT_EQ(ra.metrics.header(), "epoch,train_loss,train_nll,train_err,valid_err,test_err,sigma,inv_loss_2,inv_loss_3\n");
  EXPECT_EQ(slurp(a / "metrics.csv"), ra.metrics.to_csv());
  // sigma follows sigma0 / (1 + e / e0)
  EXPECT_DOUBLE_EQ(ra.metrics.at(1, "sigma"), 0.1 / 1.1);
  const auto model = load_checkpoint(a / "model.tprop");
  const auto& net = std::get<NetworkParams>(model);
  EXPECT_EQ(evaluate(net, ds, split_index(ds).train, 1, eval_stream(cfg.seed, Split::train)).error_rate,
            ra.final["final_train_err"].get<double>());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Run, DifferentSeedsDiffer) {
  const Dataset ds = load_mnist(kMnist);
  ExperimentConfig cfg = tiny(Experiment::mnist_mlp, Method::backprop);
  const RunResult a = run_experiment(cfg, ds);
  cfg.seed = 5;
  const RunResult b = run_experiment(cfg, ds);
  EXPECT_NE(a.metrics.to_csv(), b.metrics.to_csv());
}

TEST(Run, EveryMethodRunsOnTheFixture) {
  const Dataset ds = load_mnist(kMnist);
  const std::pair<Experiment, Method> combos[] = {
      {Experiment::mnist_mlp, Method::vanilla_tp},   {Experiment::discrete, Method::dtp},
      {Experiment::discrete, Method::straight_through}, {Experiment::discrete, Method::frozen_lower},
      {Experiment::stochastic, Method::dtp},         {Experiment::stochastic, Method::straight_through}};
  for (const auto& [e, m] : combos) {
    SCOPED_TRACE(std::string(to_string(e)) + "/" + std::string(to_string(m)));
    const RunResult r = run_experiment(tiny(e, m), ds);
    for (double v : r.metrics.column("train_loss")) EXPECT_TRUE(std::isfinite(v));
    if (e == Experiment::stochastic) {
      EXPECT_EQ(r.final["eval_samples"].get<std::size_t>(), 3u);
    }
  }
}

TEST(Run, LimitTruncatesSplits) {
  const Dataset ds = load_mnist(kMnist);
  const SplitIndex s = split_index(ds, 7);
  EXPECT_EQ(s.train.size(), 7u);
  EXPECT_EQ(s.valid.size(), 7u);
  EXPECT_EQ(s.test.size(), 7u);
}

TEST(Run, AutoEncoderReducesReconstructionError) {
  const Dataset ds = load_mnist(kMnist);
  ExperimentConfig cfg = default_config(Experiment::autoencoder);
  cfg.width = 32;
  cfg.epochs = 5;
  cfg.batch_size = 10;
  cfg.optimizer.lr_forward = 1e-2;
  const RunResult r = run_experiment(cfg, ds);
  const auto mse = r.metrics.column("train_mse");
  EXPECT_LT(mse.back(), mse.front());
  EXPECT_TRUE(std::holds_alternative<AutoEncoderParams>(r.model));
}

TEST(Filters, PgmHeaderAndSize) {
  Rng rng(161);
  const AutoEncoderParams ae = build_autoencoder(784, 120, rng);
  const std::string pgm = render_filter_grid(ae, 3);
  const std::string header = "P5 280 280 255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  EXPECT_EQ(pgm.size(), header.size() + 280u * 280u);
  EXPECT_EQ(pgm, render_filter_grid(ae, 3));
  EXPECT_NE(pgm, render_filter_grid(ae, 4));
}

TEST(Filters, ConstantTileIsMidGrey) {
  AutoEncoderParams ae{Matrix(1, 784, 0.25), Vector(1), Vector(784)};
  const std::string pgm = render_filter_grid(ae, 1);
  const std::size_t off = std::string("P5 280 280 255\n").size();
  EXPECT_EQ(static_cast<unsigned char>(pgm[off]), 128);
  EXPECT_EQ(static_cast<unsigned char>(pgm[off + 27 * 280 + 27]), 128);
  EXPECT_EQ(static_cast<unsigned char>(pgm[off + 28]), 0);  // second tile is absent
}

TEST(Filters, TileIsMinMaxNormalised) {
  Matrix W(1, 784);
  for (std::size_t p = 0; p < 784; ++p) W(0, p) = static_cast<double>(p);
  const std::string pgm = render_filter_grid(AutoEncoderParams{W, Vector(1), Vector(784)}, 1);
  const std::size_t off = std::string("P5 280 280 255\n").size();
  EXPECT_EQ(static_cast<unsigned char>(pgm[off]), 0);
  EXPECT_EQ(static_cast<unsigned char>(pgm[off + 27 * 280 + 27]), 255);
}

TEST(Filters, WrongVisibleSizeRejected) {
  Rng rng(162);
  EXPECT_THROW((void)render_filter_grid(build_autoencoder(100, 10, rng), 1), FormatError);
}
