// Acceptance checks, one per criterion. Prints a single PASS/FAIL line for
// the criterion it runs and exits 0 (pass), 1 (fail) or 77 (skipped: MNIST
// not available).

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "tprop/tprop.hpp"

namespace fs = std::filesystem;
using namespace tprop;

namespace {

constexpr int kSkip = 77;
constexpr std::uint64_t kSeed = 7;

struct Outcome {
  bool pass = false;
  bool skipped = false;
  std::string detail;
};

struct Context {
  fs::path data;
  fs::path work;
  bool have_mnist() const {
    return fs::exists(data / "train-images-idx3-ubyte") || fs::exists(data / "train-images-idx3-ubyte.gz");
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

std::string pct(double v) { return fmt(100.0 * v, 3) + "%"; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_csv(const fs::path& dir, const std::string& name, const std::string& csv) {
  fs::create_directories(dir);
  detail::write_text(dir / name, csv);
}

Outcome suite_outcome(const SuiteResult& r, const fs::path& dir, double seconds, double budget) {
  write_csv(dir, "verify_" + r.name + ".csv", r.csv);
  Outcome o;
  o.pass = r.pass && seconds < budget;
  o.detail = r.summary + "; " + fmt(seconds, 3) + " s (budget " + fmt(budget, 3) + " s)";
  if (!r.failures.empty()) o.detail += "; first failure: " + r.failures.front();
  return o;
}

// ---------------------------------------------------------------------------

Outcome criterion1(const Context&, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteResult r = run_gradient_suite(kSeed, 100);
  return suite_outcome(r, dir, seconds_since(t0), 60.0);
}

// Square invertible linear nets with exact inverses: difference and vanilla
// targets coincide and every post-target local loss vanishes.
Outcome criterion2(const Context&, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::size_t depth = 4, width = 6, seeds = 100;
  std::string csv = "seed,max_target_gap,max_local_loss,pass\n";
  double worst_gap = 0.0, worst_loss = 0.0;
  std::size_t ok = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng = Rng(kSeed + s).split("dtp_tp_equivalence");
    std::vector<ForwardLayer> f;
    std::vector<InverseLayer> g;
    for (std::size_t i = 0; i < depth; ++i) {
      const LayerPair p = exact_linear_pair(width, rng);
      f.push_back(p.f);
      g.push_back(p.g);
    }
    std::vector<Matrix> h{gaussian_matrix(width, 3, 1.0, rng)};
    for (const auto& layer : f) h.push_back(forward(layer, h.back()).output);
    std::vector<Matrix> dtp(depth + 1), tp(depth + 1);
    dtp[depth] = tp[depth] = h[depth] + gaussian_matrix(width, 3, 0.1, rng);
    double gap = 0.0, loss = 0.0;
    for (std::size_t i = depth; i >= 2; --i) {
      // g[i-1] inverts f_i
      dtp[i - 1] = dtp_target(h[i - 1], h[i], dtp[i], g[i - 1]);
      tp[i - 1] = vanilla_tp_target(g[i - 1], tp[i]);
      for (std::size_t k = 0; k < dtp[i - 1].size(); ++k)
        gap = std::max(gap, std::abs(dtp[i - 1].data()[k] - tp[i - 1].data()[k]));
      loss = std::max(loss, squared_norm((dtp[i] - forward(f[i - 1], dtp[i - 1]).output).data()));
    }
    const bool pass = gap < 1e-10 && loss < 1e-10;
    if (pass) ++ok;
    worst_gap = std::max(worst_gap, gap);
    worst_loss = std::max(worst_loss, loss);
    csv += std::to_string(kSeed + s) + "," + detail::fmt_real(gap) + "," + detail::fmt_real(loss) + "," +
           (pass ? "1" : "0") + "\n";
  }
  write_csv(dir, "dtp_tp_equivalence.csv", csv);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = ok == seeds && secs < 10.0;
  o.detail = std::to_string(ok) + "/" + std::to_string(seeds) + " seeds; max |dtp - tp| " + fmt(worst_gap) +
             ", max local loss " + fmt(worst_loss) + "; " + fmt(secs, 3) + " s";
  return o;
}

Outcome criterion3(const Context&, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteResult r = run_thm1_suite(kSeed, 100);
  return suite_outcome(r, dir, seconds_since(t0), 60.0);
}

Outcome criterion4(const Context&, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteResult r = run_thm2_suite(kSeed, 100, 100);
  return suite_outcome(r, dir, seconds_since(t0), 60.0);
}

Outcome criterion5(const Context&, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteResult r = run_prop2_suite(kSeed, 20);
  return suite_outcome(r, dir, seconds_since(t0), 120.0);
}

// ---------------------------------------------------------------------------
// MNIST training criteria

ExperimentConfig preset(const std::string& name) { return load_config(fs::path(TPROP_PRESETS) / name); }

RunResult train(const ExperimentConfig& cfg, const Dataset& ds, const fs::path& out) {
  fs::create_directories(out);
  std::cerr << "training " << to_string(cfg.experiment) << "/" << to_string(cfg.method) << " -> " << out << "\n";
  return run_experiment(cfg, ds, RunOptions{out, 0, &std::cerr});
}

double window_mean_last(const std::vector<double>& v, std::size_t n) {
  const std::size_t k = std::min(n, v.size());
  return std::accumulate(v.end() - static_cast<std::ptrdiff_t>(k), v.end(), 0.0) / static_cast<double>(k);
}

Outcome criterion6(const Context& ctx, const fs::path& dir) {
  const Dataset ds = load_mnist(ctx.data);
  ExperimentConfig cfg = preset("mnist_7h_tanh.json");
  cfg.hidden_layers = 3;
  const auto t0 = std::chrono::steady_clock::now();
  const RunResult dtp = train(cfg, ds, dir / "dtp");
  cfg.method = Method::backprop;
  const RunResult bp = train(cfg, ds, dir / "backprop");

  const auto loss = dtp.metrics.column("train_loss");
  bool monotone = loss.size() >= 6;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t e = 5; e <= loss.size(); ++e) {
    const double m = std::accumulate(loss.begin() + static_cast<std::ptrdiff_t>(e - 5),
                                     loss.begin() + static_cast<std::ptrdiff_t>(e), 0.0) / 5.0;
    monotone = monotone && m < prev;
    prev = m;
  }
  const double d = dtp.final["final_test_err"].get<double>();
  const double b = bp.final["final_test_err"].get<double>();
  Outcome o;
  o.pass = d <= 0.04 && b <= 0.03 && monotone;
  o.detail = "784-240x3-10 tanh, 30 epochs: DTP test " + pct(d) + " (<= 4%), BP test " + pct(b) +
             " (<= 3%), DTP trailing 5-epoch loss means " + (monotone ? "decreasing" : "NOT decreasing") + "; " +
             fmt(seconds_since(t0) / 60.0, 3) + " min";
  return o;
}

Outcome criterion7(const Context& ctx, const fs::path& dir) {
  const Dataset ds = load_mnist(ctx.data);
  ExperimentConfig cfg = preset("mnist_discrete.json");
  const auto t0 = std::chrono::steady_clock::now();
  const RunResult dtp = train(cfg, ds, dir / "dtp");
  cfg.method = Method::straight_through;
  const RunResult st = train(cfg, ds, dir / "straight_through");
  cfg.method = Method::frozen_lower;
  const RunResult fr = train(cfg, ds, dir / "frozen_lower");

  const double dtp_test = dtp.final["final_test_err"].get<double>();
  const double fr_test = fr.final["final_test_err"].get<double>();
  const double dtp_train = window_mean_last(dtp.metrics.column("train_err"), 5);
  const double st_plateau = window_mean_last(st.metrics.column("train_err"), 5);
  const bool a = fr_test > dtp_test, b = dtp_train < st_plateau, c = dtp_test <= 0.05;
  Outcome o;
  o.pass = a && b && c;
  o.detail = std::string("(a) frozen-lower test ") + pct(fr_test) + " vs DTP " + pct(dtp_test) + (a ? " ok" : " FAIL") +
             "; (b) DTP final-window train " + pct(dtp_train) + " vs straight-through plateau " + pct(st_plateau) +
             (b ? " ok" : " FAIL") + "; (c) DTP test <= 5%" + (c ? " ok" : " FAIL") + "; " +
             fmt(seconds_since(t0) / 60.0, 3) + " min";
  return o;
}

Outcome criterion8(const Context& ctx, const fs::path& dir) {
  const Dataset ds = load_mnist(ctx.data);
  ExperimentConfig cfg = preset("mnist_stochastic.json");
  const auto t0 = std::chrono::steady_clock::now();
  const RunResult dtp = train(cfg, ds, dir / "dtp");
  cfg.method = Method::straight_through;
  const RunResult st = train(cfg, ds, dir / "straight_through");
  const double d = dtp.final["final_test_err"].get<double>();
  const double s = st.final["final_test_err"].get<double>();
  Outcome o;
  o.pass = d <= 0.04 && d <= s + 0.005;
  o.detail = "784-200-200-10 stochastic, M=" + std::to_string(cfg.eval_samples) + " at test: DTP " + pct(d) +
             " (<= 4%), straight-through " + pct(s) + " (DTP must be <= ST + 0.5 pp); " +
             fmt(seconds_since(t0) / 60.0, 3) + " min";
  return o;
}

Outcome criterion9(const Context& ctx, const fs::path& dir) {
  const Dataset ds = load_mnist(ctx.data);
  const ExperimentConfig cfg = preset("mnist_autoencoder.json");
  const auto t0 = std::chrono::steady_clock::now();
  const RunResult r = train(cfg, ds, dir / "dtp");
  const double mse = r.final["final_test_mse"].get<double>();
  const fs::path pgm = dir / "filters.pgm";
  detail::write_text(pgm, render_filter_grid(std::get<AutoEncoderParams>(r.model), cfg.seed));
  const bool grid = fs::file_size(pgm) == std::string("P5 280 280 255\n").size() + 280 * 280;
  Outcome o;
  o.pass = mse <= 0.02 && grid;
  o.detail = "784-" + std::to_string(cfg.width) + " auto-encoder, " + std::to_string(cfg.epochs) +
             " epochs: test reconstruction MSE " + fmt(mse) + " (<= 0.02); filter grid " +
             (grid ? "written" : "MISSING") + " (" + pgm.string() + "); " + fmt(seconds_since(t0) / 60.0, 3) + " min";
  return o;
}

using Criterion = std::function<Outcome(const Context&, const fs::path&)>;

const Criterion kCriteria[] = {criterion1, criterion2, criterion3, criterion4, criterion5,
                               criterion6, criterion7, criterion8, criterion9};

bool needs_mnist(int n) { return n >= 6 && n <= 9; }

// Every CSV below `dir` except wall-clock timings, keyed by relative path.
std::map<std::string, std::string> collect_csv(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv" || e.path().filename() == "timing.csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

fs::path criterion_dir(const Context& ctx, int n) { return ctx.work / ("criterion_" + std::to_string(n)); }

// Reruns criteria 1-9 and compares their CSV outputs byte for byte with the
// earlier run (which is produced first if it is missing).
Outcome criterion10(const Context& ctx, const fs::path& dir) {
  std::vector<std::string> checked, mismatched, skipped;
  std::size_t files = 0;
  for (int n = 1; n <= 9; ++n) {
    if (needs_mnist(n) && !ctx.have_mnist()) {
      skipped.push_back(std::to_string(n));
      continue;
    }
    const fs::path first = criterion_dir(ctx, n);
    if (collect_csv(first).empty()) kCriteria[n - 1](ctx, first);
    const fs::path again = dir / ("rerun_" + std::to_string(n));
    fs::remove_all(again);
    kCriteria[n - 1](ctx, again);
    const auto a = collect_csv(first), b = collect_csv(again);
    files += a.size();
    if (a.empty() || a != b) {
      mismatched.push_back(std::to_string(n));
      for (const auto& [name, bytes] : a) {
        const auto it = b.find(name);
        if (it == b.end() || it->second != bytes) std::cerr << "criterion " << n << ": " << name << " differs\n";
      }
    } else {
      checked.push_back(std::to_string(n));
    }
  }
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s.empty() ? std::string("none") : s;
  };
  Outcome o;
  o.pass = mismatched.empty() && !checked.empty();
  o.detail = "byte-identical CSVs on rerun for criteria " + join(checked) + " (" + std::to_string(files) +
             " files); mismatched: " + join(mismatched);
  if (!skipped.empty()) o.detail += "; not rerun (no MNIST): " + join(skipped);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int criterion = 0;
  std::string data = "/root/data/mnist", work = "acceptance";
  if (const char* env = std::getenv("TPROP_DATA_DIR"); env != nullptr && *env != '\0') data = env;
  app.add_option("--criterion", criterion, "Criterion number (1-10); 0 runs all")->check(CLI::Range(0, 10));
  app.add_option("--data", data, "MNIST directory (default $TPROP_DATA_DIR, then /root/data/mnist)");
  app.add_option("--work", work, "Directory for CSV outputs");
  CLI11_PARSE(app, argc, argv);

  const Context ctx{data, work};
  std::vector<int> which;
  if (criterion == 0)
    for (int n = 1; n <= 10; ++n) which.push_back(n);
  else
    which.push_back(criterion);

  bool all_pass = true, any_skip = false;
  for (int n : which) {
    Outcome o;
    try {
      if (needs_mnist(n) && !ctx.have_mnist()) {
        o.skipped = true;
        o.detail = "MNIST not found in " + ctx.data.string();
      } else {
        const fs::path dir = criterion_dir(ctx, n);
        if (n <= 9) fs::remove_all(dir);
        o = n == 10 ? criterion10(ctx, ctx.work / "determinism") : kCriteria[n - 1](ctx, dir);
      }
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    std::cout << "criterion " << n << ": " << (o.skipped ? "SKIP" : (o.pass ? "PASS" : "FAIL")) << " - " << o.detail
              << std::endl;
    any_skip = any_skip || o.skipped;
    all_pass = all_pass && (o.pass || o.skipped);
  }
  if (!all_pass) return 1;
  return any_skip && which.size() == 1 ? kSkip : 0;
}
