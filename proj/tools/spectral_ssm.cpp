#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "sssm/bench.hpp"
#include "sssm/fft_conv.hpp"
#include "sssm/filterbank.hpp"
#include "sssm/io.hpp"
#include "sssm/lds.hpp"
#include "sssm/stack.hpp"
#include "sssm/stu.hpp"
#include "sssm/theory.hpp"
#include "sssm/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace sssm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitCheckFailed = 2;
constexpr int kExitUsage = 64;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::string out = "sssm-out";
  std::uint64_t seed = 0;
  int threads = 0;
  bool deterministic = false;

  ThreadBudget budget() const {
    ThreadBudget b;
    b.threads = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    b.deterministic = deterministic;
    return b;
  }
};

// Outcome of one subcommand: artifacts written under the output directory and
// whether the scientific checks held.
struct Outcome {
  bool checks_passed = true;
  std::string diagnostic;
  json summary = json::object();
  std::vector<std::string> artifacts;
};

std::vector<Eigen::Index> parse_index_list(const std::string& text) {
  std::vector<Eigen::Index> out;
  std::stringstream ss(text);
  std::string tok;
  auto to_index = [&](const std::string& s) {
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw UsageError("bad integer '" + s + "' in list '" + text + "'");
    return static_cast<Eigen::Index>(v);
  };
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    if (auto dots = tok.find(".."); dots != std::string::npos) {
      const auto lo = to_index(tok.substr(0, dots));
      const auto hi = to_index(tok.substr(dots + 2));
      if (hi < lo) throw UsageError("empty range '" + tok + "'");
      for (auto k = lo; k <= hi; ++k) out.push_back(k);
    } else {
      out.push_back(to_index(tok));
    }
  }
  if (out.empty()) throw UsageError("empty list '" + text + "'");
  return out;
}

LdsParams load_fixture(const std::string& name) {
  if (name == "sec31") return sec31_fixture();
  if (!fs::exists(name)) throw UsageError("fixture not found: " + name);
  return load_lds(name);
}

json parse(const std::string& text) { return json::parse(text); }

void write_artifact(Outcome& o, const fs::path& out, const std::string& name, const std::string& text) {
  io::write_text(out / name, text);
  o.artifacts.push_back(name);
}

// Training flags shared by fit-stu, fit-lru, sweep-k and train-stack.
struct TrainFlags {
  double lr = 1e-2;
  std::size_t steps = 1000;
  std::size_t batch = 1;
  std::string optimizer = "adam";
  std::string schedule = "warmup_cosine";
  double warmup_frac = 0.1;
  double weight_decay = 0.0;
  std::size_t eval_every = 0;

  void add(CLI::App* sub) {
    sub->add_option("--lr", lr, "Learning rate");
    sub->add_option("--steps", steps, "Optimizer steps");
    sub->add_option("--batch", batch, "Minibatch size");
    sub->add_option("--optimizer", optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
    sub->add_option("--schedule", schedule, "constant | warmup_cosine")
        ->check(CLI::IsMember({"constant", "warmup_cosine"}));
    sub->add_option("--warmup-frac", warmup_frac, "Warmup fraction of the step budget");
    sub->add_option("--weight-decay", weight_decay, "L2 weight decay");
    sub->add_option("--eval-every", eval_every, "Full-dataset evaluation period (0 = off)");
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.learning_rate = lr;
    c.steps = steps;
    c.batch_size = batch;
    c.seed = seed;
    c.optimizer = optimizer == "sgd" ? OptimizerKind::SGD : OptimizerKind::Adam;
    c.schedule = schedule == "constant" ? LrSchedule::Constant : LrSchedule::WarmupCosine;
    c.warmup_frac = warmup_frac;
    c.weight_decay = weight_decay;
    c.eval_every = eval_every;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------- commands

struct GenFilters {
  Eigen::Index L = 256;
  Eigen::Index K = 24;
  std::string variant = "primary";
  std::string cache_root;

  void add(CLI::App* sub) {
    sub->add_option("--L", L, "Sequence length");
    sub->add_option("--K", K, "Number of filters");
    sub->add_option("--variant", variant, "primary | alternative")->check(CLI::IsMember({"primary", "alternative"}));
    sub->add_option("--cache-root", cache_root, "Cache root (default: $SPECTRAL_STU_CACHE, else <out>/filters)");
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    fs::path root = out / "filters";
    if (!cache_root.empty()) {
      root = cache_root;
    } else if (const char* env = std::getenv("SPECTRAL_STU_CACHE"); env && *env) {
      root = env;
    }
    const auto v = parse_variant(variant);
    const FilterBank bank = cached_filterbank(L, K, v, root);
    validate_filterbank(bank);
    Outcome o;
    std::ostringstream csv;
    csv << "k,sigma\n";
    for (Eigen::Index k = 0; k < bank.K; ++k) csv << k << ',' << io::format_real(bank.sigma(k)) << '\n';
    write_artifact(o, out, "sigma.csv", csv.str());
    o.summary["cache_dir"] = (root / filterbank_cache_name(L, K, v)).string();
    o.summary["max_residual"] = bank.max_residual();
    o.summary["max_off_orthogonality"] = bank.max_off_orthogonality();
    (void)g;
    return o;
  }
};

struct SimulateLds {
  std::string fixture;
  Eigen::Index hidden = 4;
  Eigen::Index d_in = 1;
  Eigen::Index d_out = 1;
  double radius = 0.99;
  Eigen::Index length = 256;
  std::size_t batch = 1;
  std::string inputs = "gaussian";

  void add(CLI::App* sub) {
    sub->add_option("--fixture", fixture, "sec31 or a system JSON path (default: random symmetric system)");
    sub->add_option("--hidden", hidden, "Hidden dimension of the random system");
    sub->add_option("--d-in", d_in, "Input channels of the random system");
    sub->add_option("--d-out", d_out, "Output channels of the random system");
    sub->add_option("--radius", radius, "Spectral radius bound of the random system");
    sub->add_option("--length", length, "Sequence length");
    sub->add_option("--batch", batch, "Number of sequences");
    sub->add_option("--inputs", inputs, "gaussian | bounded")->check(CLI::IsMember({"gaussian", "bounded"}));
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    const LdsParams lds =
        fixture.empty() ? random_symmetric_system(hidden, d_in, d_out, radius, g.seed) : load_fixture(fixture);
    const SequenceBatch u = inputs == "bounded" ? bounded_inputs(batch, length, lds.input_dim(), g.seed)
                                                : gaussian_inputs(batch, length, lds.input_dim(), g.seed);
    const SequenceBatch y = simulate_lds(lds, u);
    Outcome o;
    std::ostringstream csv;
    csv << "seq,t";
    for (Eigen::Index c = 0; c < lds.input_dim(); ++c) csv << ",u" << c;
    for (Eigen::Index c = 0; c < lds.output_dim(); ++c) csv << ",y" << c;
    csv << '\n';
    for (std::size_t s = 0; s < u.size(); ++s)
      for (Eigen::Index t = 0; t < length; ++t) {
        csv << s << ',' << t;
        for (Eigen::Index c = 0; c < u[s].cols(); ++c) csv << ',' << io::format_real(u[s](t, c));
        for (Eigen::Index c = 0; c < y[s].cols(); ++c) csv << ',' << io::format_real(y[s](t, c));
        csv << '\n';
      }
    write_artifact(o, out, "trajectories.csv", csv.str());
    write_artifact(o, out, "system.json", lds_to_json(lds));
    o.summary["spectral_radius"] = lds.spectral_radius();
    return o;
  }
};

struct VerifyTheorem {
  std::size_t systems = 50;
  Eigen::Index L = 256;
  std::string K = "8,16,24";
  Eigen::Index max_hidden = 16;
  Eigen::Index d_in = 2;
  Eigen::Index d_out = 2;
  std::string variant = "primary";
  std::string fixture;

  void add(CLI::App* sub) {
    sub->add_option("--systems", systems, "Random symmetric systems");
    sub->add_option("--L", L, "Sequence length");
    sub->add_option("--K", K, "Filter counts, e.g. 24 or 8,16,24 or 4..24");
    sub->add_option("--max-hidden", max_hidden, "Largest hidden dimension");
    sub->add_option("--d-in", d_in, "Input channels");
    sub->add_option("--d-out", d_out, "Output channels");
    sub->add_option("--variant", variant, "primary | alternative")->check(CLI::IsMember({"primary", "alternative"}));
    sub->add_option("--fixture", fixture, "Also sweep K on this system (sec31 or JSON path)");
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    BatteryConfig cfg;
    cfg.systems = systems;
    cfg.L = L;
    cfg.K_values = parse_index_list(K);
    cfg.max_hidden = max_hidden;
    cfg.d_in = d_in;
    cfg.d_out = d_out;
    cfg.seed = g.seed;
    cfg.variant = parse_variant(variant);
    const auto trials = theorem_battery(cfg, g.budget());

    Outcome o;
    json report;
    report["trials"] = json::array();
    std::ostringstream csv;
    csv << "seed,d_h,K,max_err,bound,satisfied\n";
    std::size_t satisfied = 0;
    double worst_ratio = 0.0;
    for (const auto& t : trials) {
      const auto& r = t.report;
      satisfied += r.satisfied ? 1 : 0;
      if (r.bound > 0) worst_ratio = std::max(worst_ratio, r.max_err / r.bound);
      json row;
      row["seed"] = t.seed;
      row["d_h"] = t.d_h;
      row["report"] = parse(r.to_json());
      report["trials"].push_back(row);
      csv << t.seed << ',' << t.d_h << ',' << r.K << ',' << io::format_real(r.max_err) << ','
          << io::format_real(r.bound) << ',' << (r.satisfied ? "true" : "false") << '\n';
    }
    report["summary"] = {{"trials", trials.size()},
                         {"satisfied", satisfied},
                         {"violations", trials.size() - satisfied},
                         {"worst_err_over_bound", worst_ratio}};
    write_artifact(o, out, "theorem_report.json", report.dump(2) + "\n");
    write_artifact(o, out, "theorem_trials.csv", csv.str());

    if (!fixture.empty()) {
      const LdsParams lds = load_fixture(fixture);
      const auto inputs = bounded_inputs(4, L, lds.input_dim(), g.seed);
      write_artifact(o, out, "theory_k_sweep.csv",
                     k_sweep_csv(theory_k_sweep(lds, cfg.K_values, inputs, cfg.variant)));
    }

    o.summary = report["summary"];
    o.checks_passed = satisfied == trials.size();
    if (!o.checks_passed) o.diagnostic = std::to_string(trials.size() - satisfied) + " bound violations";
    return o;
  }
};

struct VerifyAr {
  std::size_t systems = 20;
  Eigen::Index length = 200;
  Eigen::Index max_d = 6;
  double radius = 0.99;
  double tol = 1e-8;

  void add(CLI::App* sub) {
    sub->add_option("--systems", systems, "Random systems");
    sub->add_option("--length", length, "Sequence length");
    sub->add_option("--max-d", max_d, "Largest state dimension");
    sub->add_option("--radius", radius, "Spectral radius bound");
    sub->add_option("--tol", tol, "Relative error tolerance");
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    const auto checks = ar_battery(systems, length, max_d, radius, g.seed, g.budget());
    Outcome o;
    std::ostringstream csv;
    csv << "seed,d,rel_err\n";
    double worst = 0.0;
    for (const auto& c : checks) {
      worst = std::max(worst, c.rel_err);
      csv << c.seed << ',' << c.d << ',' << io::format_real(c.rel_err) << '\n';
    }
    write_artifact(o, out, "ar_checks.csv", csv.str());
    o.summary = {{"systems", checks.size()}, {"max_rel_err", worst}, {"tol", tol}};
    o.checks_passed = worst <= tol;
    if (!o.checks_passed) o.diagnostic = "AR relative error above tolerance";
    return o;
  }
};

struct FitStu {
  std::string fixture = "sec31";
  Eigen::Index K = 25;
  Eigen::Index k_y = 0;
  std::size_t sequences = 32;
  Eigen::Index length = 256;
  std::string method = "gd";
  TrainFlags train{1e-2, 2000};

  void add(CLI::App* sub) {
    sub->add_option("--fixture", fixture, "sec31 or a system JSON path");
    sub->add_option("--K", K, "Number of filters");
    sub->add_option("--k-y", k_y, "Autoregressive output lags (0 = vanilla STU)");
    sub->add_option("--sequences", sequences, "Training sequences");
    sub->add_option("--length", length, "Sequence length");
    sub->add_option("--method", method, "gd | least_squares")->check(CLI::IsMember({"gd", "least_squares"}));
    train.add(sub);
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    const LdsParams lds = load_fixture(fixture);
    const auto data = lds_dataset(lds, sequences, length, g.seed);
    const FilterBank bank = cached_filterbank(length, K, HankelVariant::Primary);
    Outcome o;
    if (method == "least_squares") {
      if (k_y != 0) throw UsageError("least_squares fits the vanilla STU only (k-y 0)");
      const auto fit = fit_stu_least_squares(data, bank, K);
      save_stu_params(fit.params, out / "params");
      o.artifacts.push_back("params");
      o.summary = {{"residual", fit.residual}, {"ridge_used", fit.ridge_used}, {"rank", fit.rank}};
      return o;
    }
    const TrainReport rep = fit_stu(data, bank, K, k_y, train.config(g.seed));
    StuParams params = StuParams::zeros(HankelVariant::Primary, K, lds.input_dim(), lds.output_dim(), k_y);
    params.unpack(rep.final_params);
    save_stu_params(params, out / "params");
    o.artifacts.push_back("params");
    write_artifact(o, out, "report.json", rep.to_json() + "\n");
    write_artifact(o, out, "loss.csv", rep.loss_csv());
    o.summary = {{"initial_loss", rep.initial_loss}, {"final_loss", rep.final_loss}};
    return o;
  }
};

struct FitLru {
  std::string fixture = "sec31";
  Eigen::Index hidden = 16;
  std::size_t sequences = 32;
  Eigen::Index length = 256;
  bool no_stable_exp = false;
  bool no_gamma_norm = false;
  bool no_ring_init = false;
  double min_rad = 0.9;
  double max_rad = 0.999;
  double max_phase = 0.6283185307179586;
  TrainFlags train{1e-2, 4000};

  void add(CLI::App* sub) {
    sub->add_option("--fixture", fixture, "sec31 or a system JSON path");
    sub->add_option("--hidden", hidden, "Complex hidden dimension");
    sub->add_option("--sequences", sequences, "Training sequences");
    sub->add_option("--length", length, "Sequence length");
    sub->add_flag("--no-stable-exp", no_stable_exp, "Parameterize magnitude and phase directly");
    sub->add_flag("--no-gamma-norm", no_gamma_norm, "Disable input normalization");
    sub->add_flag("--no-ring-init", no_ring_init, "Magnitudes near 1 and phases over the full circle");
    sub->add_option("--min-rad", min_rad, "Ring initialization inner radius");
    sub->add_option("--max-rad", max_rad, "Ring initialization outer radius");
    sub->add_option("--max-phase", max_phase, "Ring initialization largest phase");
    train.add(sub);
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    const LdsParams lds = load_fixture(fixture);
    const auto data = lds_dataset(lds, sequences, length, g.seed);
    LruOptions opts;
    opts.stable_exp = !no_stable_exp;
    opts.gamma_norm = !no_gamma_norm;
    opts.ring_init = !no_ring_init;
    opts.min_rad = min_rad;
    opts.max_rad = max_rad;
    opts.max_init_phase = max_phase;
    const TrainReport rep = fit_lru(data, hidden, train.config(g.seed), opts);
    Outcome o;
    write_artifact(o, out, "report.json", rep.to_json() + "\n");
    write_artifact(o, out, "loss.csv", rep.loss_csv());
    o.summary = {{"initial_loss", rep.initial_loss},
                 {"final_loss", std::isfinite(rep.final_loss) ? json(rep.final_loss) : json(nullptr)},
                 {"converged", rep.converged}};
    o.checks_passed = rep.converged;
    o.diagnostic = rep.diagnostic;
    return o;
  }
};

struct SweepK {
  std::string fixture = "sec31";
  std::string K = "1..30";
  std::size_t train_sequences = 16;
  std::size_t test_sequences = 4;
  Eigen::Index length = 256;
  std::string method = "least_squares";
  TrainFlags train{1e-2, 2000};

  void add(CLI::App* sub) {
    sub->add_option("--fixture", fixture, "sec31 or a system JSON path");
    sub->add_option("--K", K, "Ascending filter counts, e.g. 1..30 or 5,10,15");
    sub->add_option("--train-sequences", train_sequences, "Training sequences");
    sub->add_option("--test-sequences", test_sequences, "Held-out sequences");
    sub->add_option("--length", length, "Sequence length");
    sub->add_option("--method", method, "least_squares | gd")->check(CLI::IsMember({"least_squares", "gd"}));
    train.add(sub);
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    const auto Ks = parse_index_list(K);
    if (!std::is_sorted(Ks.begin(), Ks.end()) || std::adjacent_find(Ks.begin(), Ks.end()) != Ks.end())
      throw UsageError("--K must be strictly ascending");
    const LdsParams lds = load_fixture(fixture);
    const FilterBank bank = cached_filterbank(length, Ks.back(), HankelVariant::Primary);
    KSweepOptions opts;
    opts.least_squares = method == "least_squares";
    opts.train = train.config(g.seed);
    opts.train_sequences = train_sequences;
    opts.test_sequences = test_sequences;
    opts.length = length;
    opts.seed = g.seed;
    const auto rows = k_sweep(lds, Ks, bank, opts, g.budget());

    Outcome o;
    write_artifact(o, out, "k_sweep.csv", k_sweep_results_csv(rows));
    std::map<Eigen::Index, double> err;
    for (const auto& r : rows) err[r.K] = r.final_error;

    bool monotone = true;
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i].final_error > rows[i - 1].final_error + 1e-12) monotone = false;
    o.summary["non_increasing"] = monotone;
    if (opts.least_squares && !monotone) {
      o.checks_passed = false;
      o.diagnostic = "least-squares error increased with K";
    }
    if (err.count(5) && err.count(15)) {
      const double ratio = err[15] / err[5];
      o.summary["ratio_15_over_5"] = ratio;
      if (!(ratio <= 0.1)) {
        o.checks_passed = false;
        o.diagnostic = "error(15)/error(5) above 0.1";
      }
    }
    // Least-squares slope of ln(error) against K over the K values in [4, 15].
    double sk = 0, se = 0, skk = 0, ske = 0, n = 0;
    for (const auto& [k, e] : err)
      if (k >= 4 && k <= 15) {
        const double le = std::log(e);
        sk += k;
        se += le;
        skk += double(k) * k;
        ske += k * le;
        n += 1;
      }
    if (n >= 2) {
      const double slope = (n * ske - sk * se) / (n * skk - sk * sk);
      o.summary["ln_error_slope_4_15"] = slope;
      if (!(slope < 0)) {
        o.checks_passed = false;
        o.diagnostic = "ln(error) slope over K in [4, 15] is not negative";
      }
    }
    double plateau = 0.0;
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i - 1].K >= 15 && rows[i].K == rows[i - 1].K + 1)
        plateau = std::max(plateau, std::abs(rows[i].final_error - rows[i - 1].final_error) / rows[i - 1].final_error);
    o.summary["max_rel_change_above_15"] = plateau;
    return o;
  }
};

struct TrainStackCmd {
  std::string task = "delayed_recall";
  std::size_t n_train = 256;
  std::size_t n_test = 256;
  Eigen::Index length = 256;
  Eigen::Index delay = 128;
  Eigen::Index n_symbols = 4;
  double noise = 0.05;
  bool random_labels = false;
  Eigen::Index layers = 2;
  Eigen::Index d_model = 32;
  Eigen::Index K = 16;
  Eigen::Index k_y = 0;
  std::string pooling = "mean";
  double layer_input_scale = 1.0;
  TrainFlags train{3e-3, 800, 16};

  void add(CLI::App* sub) {
    sub->add_option("--task", task, "delayed_recall | parity_prefix | noisy_lds_class")
        ->check(CLI::IsMember({"delayed_recall", "parity_prefix", "noisy_lds_class"}));
    sub->add_option("--n-train", n_train, "Training sequences");
    sub->add_option("--n-test", n_test, "Held-out sequences");
    sub->add_option("--length", length, "Sequence length");
    sub->add_option("--delay", delay, "delayed_recall: steps between cue and end");
    sub->add_option("--n-symbols", n_symbols, "delayed_recall: cue alphabet size");
    sub->add_option("--noise", noise, "Input noise standard deviation");
    sub->add_flag("--random-labels", random_labels, "Replace labels by independent draws");
    sub->add_option("--layers", layers, "STU layers");
    sub->add_option("--d-model", d_model, "Model width");
    sub->add_option("--K", K, "Filters per layer");
    sub->add_option("--k-y", k_y, "Autoregressive output lags per layer");
    sub->add_option("--pooling", pooling, "mean | last")->check(CLI::IsMember({"mean", "last"}));
    sub->add_option("--layer-input-scale", layer_input_scale, "Multiplier on each STU input");
    train.add(sub);
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    TaskConfig t;
    t.task = parse_task(task);
    t.n_train = n_train;
    t.n_test = n_test;
    t.length = length;
    t.delay = delay;
    t.n_symbols = n_symbols;
    t.noise = noise;
    t.random_labels = random_labels;
    t.seed = g.seed;
    StackConfig s;
    s.n_layers = layers;
    s.d_model = d_model;
    s.K = K;
    s.k_y = k_y;
    s.L = length;
    s.pooling = parse_pooling(pooling);
    s.layer_input_scale = layer_input_scale;
    const auto res = train_stack(t, s, train.config(g.seed), g.budget());
    save_stack_model(res.model, out / "model");
    Outcome o;
    o.artifacts.push_back("model");
    write_artifact(o, out, "report.json", res.report.to_json() + "\n");
    write_artifact(o, out, "loss.csv", res.report.loss_csv());
    o.summary = {{"initial_loss", res.report.initial_loss},
                 {"final_loss", res.report.final_loss},
                 {"train_accuracy", res.train_accuracy},
                 {"test_accuracy", res.test_accuracy}};
    return o;
  }
};

struct Bench {
  std::string L = "2048,4096";
  Eigen::Index K = 24;
  Eigen::Index d_in = 8;
  std::size_t batch = 1;
  int repeats = 5;

  void add(CLI::App* sub) {
    sub->add_option("--L", L, "Sequence lengths");
    sub->add_option("--K", K, "Number of filters");
    sub->add_option("--d-in", d_in, "Input channels");
    sub->add_option("--batch", batch, "Sequences per featurize call");
    sub->add_option("--repeats", repeats, "Timed repetitions (median reported)");
  }

  Outcome run(const Globals& g, const fs::path& out) const {
    const auto Ls = parse_index_list(L);
    Outcome o;
    std::ostringstream csv;
    csv << "L,median_seconds\n";
    json rows = json::array();
    double prev = 0.0;
    for (const auto l : Ls) {
      const double sec = median_featurize_seconds(l, K, d_in, batch, repeats, g.seed);
      csv << l << ',' << io::format_real(sec) << '\n';
      json row = {{"L", l}, {"median_seconds", sec}};
      if (prev > 0) row["ratio_to_previous"] = sec / prev;
      rows.push_back(row);
      prev = sec;
    }
    write_artifact(o, out, "bench.csv", csv.str());
    o.summary["rows"] = rows;
    return o;
  }
};

// Config files are JSON objects whose keys are option names without the
// leading dashes. Keys under an object named after the subcommand apply to it
// alone. Values become command-line arguments placed before the real ones, so
// explicit flags win.
std::vector<std::string> config_arguments(const json& cfg, const CLI::App* sub) {
  std::vector<std::string> args;
  auto emit = [&](const std::string& key, const json& value, const CLI::App* scope) {
    const CLI::Option* opt = scope->get_option_no_throw("--" + key);
    if (opt == nullptr) throw UsageError("unknown config key '" + key + "'");
    if (value.is_boolean()) {
      args.push_back("--" + key + "=" + (value.get<bool>() ? "true" : "false"));
      return;
    }
    std::string text;
    if (value.is_array()) {
      for (const auto& v : value) text += (text.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
    } else {
      text = value.is_string() ? value.get<std::string>() : value.dump();
    }
    args.push_back("--" + key);
    args.push_back(text);
  };
  if (!cfg.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    if (value.is_object()) {
      if (key == sub->get_name())
        for (const auto& [k2, v2] : value.items()) emit(k2, v2, sub);
      continue;
    }
    if (key == "config") throw UsageError("config files cannot nest");
    emit(key, value, sub->get_option_no_throw("--" + key) ? sub : sub->get_parent());
  }
  return args;
}

json effective_options(const CLI::App* sub) {
  json out = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name.empty()) continue;
    std::string value;
    if (opt->count() > 0 && opt->get_type_size_max() == 0) {
      value = opt->as<bool>() ? "true" : "false";
    } else if (opt->count() > 0) {
      value = opt->results().back();
    } else {
      value = opt->get_default_str();
      if (value.empty() && opt->get_type_size_max() == 0) value = "false";
    }
    out[name] = value;
  }
  return out;
}

std::string eigen_version() {
  return std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
         std::to_string(EIGEN_MINOR_VERSION);
}

int write_run_json(const fs::path& out, const std::string& command, const json& options, const Globals& g,
                   int code, const Outcome& o, double seconds) {
  json run;
  run["command"] = command;
  run["config"] = options;
  run["seed"] = g.seed;
  run["threads"] = g.budget().effective();
  run["deterministic"] = g.deterministic;
  run["versions"] = {{"spectral_ssm", SSSM_VERSION}, {"eigen", eigen_version()}, {"fft", fft_backend_version()}};
  run["exit_code"] = code;
  run["checks_passed"] = o.checks_passed;
  run["diagnostic"] = o.diagnostic;
  run["summary"] = o.summary;
  run["artifacts"] = o.artifacts;
  run["timing"] = {{"wall_seconds", seconds}};
  io::write_text(out / "run.json", run.dump(2) + "\n");
  return code;
}

int real_main(int argc, char** argv) {
  std::vector<std::string> raw(argv + 1, argv + argc);

  Globals g;
  GenFilters gen;
  SimulateLds sim;
  VerifyTheorem thm;
  VerifyAr ar;
  FitStu stu;
  FitLru lru;
  SweepK sweep;
  TrainStackCmd stack;
  Bench bench;

  CLI::App app{"Spectral state space models: filters, theorem checks, training and benchmarks"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads (0 = hardware concurrency)");
  app.add_flag("--deterministic", g.deterministic, "Sequential reductions");
  app.add_flag_callback("--version", [] { throw CLI::CallForVersion(SSSM_VERSION, 0); }, "Print the version");

  std::map<std::string, std::function<Outcome(const Globals&, const fs::path&)>> runners;
  auto reg = [&](const std::string& name, const std::string& help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    cmd.add(sub);
    runners[name] = [&cmd](const Globals& gl, const fs::path& out) { return cmd.run(gl, out); };
  };
  reg("gen-filters", "Compute (or load from cache) a spectral filter bank", gen);
  reg("simulate-lds", "Simulate a linear dynamical system", sim);
  reg("verify-theorem", "Check the constructive STU approximation bound on random systems", thm);
  reg("verify-ar", "Check the exact autoregressive representation on random systems", ar);
  reg("fit-stu", "Train an STU on data from a fixture system", stu);
  reg("fit-lru", "Train an LRU baseline on data from a fixture system", lru);
  reg("sweep-k", "Held-out STU error versus the number of filters", sweep);
  reg("train-stack", "Train a stacked STU classifier on a synthetic task", stack);
  reg("bench", "Median featurize wall time versus sequence length", bench);

  try {
    app.parse(argc, argv);
    if (!g.config.empty()) {
      if (!fs::is_regular_file(g.config)) throw UsageError("config not readable: " + g.config);
      json cfg;
      try {
        cfg = json::parse(io::read_text(g.config));
      } catch (const json::exception& e) {
        throw UsageError("config is not valid JSON: " + std::string(e.what()));
      }
      const CLI::App* sub = app.get_subcommands().front();
      std::vector<std::string> merged{sub->get_name()};
      for (auto& a : config_arguments(cfg, sub)) merged.push_back(std::move(a));
      const auto pos = std::find(raw.begin(), raw.end(), sub->get_name());
      merged.insert(merged.end(), pos + 1, raw.end());
      merged.insert(merged.end(), raw.begin(), pos);
      std::reverse(merged.begin(), merged.end());
      app.clear();
      app.parse(merged);
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  const fs::path out = g.out;
  json options = effective_options(sub);
  const json globals = effective_options(&app);
  for (const auto& [k, v] : globals.items())
    if (k != "version") options[k] = v;

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  Outcome o;
  int code = kExitOk;
  try {
    fs::create_directories(out);
    o = runners.at(command)(g, out);
    code = o.checks_passed ? kExitOk : kExitCheckFailed;
    if (!o.checks_passed) std::cerr << command << ": check failed: " << o.diagnostic << '\n';
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    o.checks_passed = false;
    o.diagnostic = e.what();
    code = kExitUsage;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    o.checks_passed = false;
    o.diagnostic = e.what();
    code = kExitUsage;
  } catch (const NonFiniteLoss& e) {
    std::cerr << command << ": training diverged: " << e.what() << '\n';
    o.checks_passed = false;
    o.diagnostic = e.what();
    code = kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    o.checks_passed = false;
    o.diagnostic = e.what();
    code = kExitRuntime;
  }
  try {
    write_run_json(out, command, options, g, code, o, elapsed());
  } catch (const std::exception& e) {
    std::cerr << "error: cannot write run.json: " << e.what() << '\n';
    return kExitRuntime;
  }
  std::cout << o.summary.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Keep freed feature buffers mapped instead of returning them to the OS on
  // every call; otherwise large sequences pay page faults per featurize.
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
#endif
  return real_main(argc, argv);
}
