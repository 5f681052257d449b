// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "sssm/bench.hpp"
#include "sssm/filterbank.hpp"
#include "sssm/lds.hpp"
#include "sssm/stack.hpp"
#include "sssm/stu.hpp"
#include "sssm/theory.hpp"
#include "sssm/trainer.hpp"
#include "test_util.hpp"

using namespace sssm;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

ThreadBudget budget() {
  ThreadBudget b;
  b.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return b;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Result theorem_battery_check() {
  BatteryConfig cfg;
  const auto trials = theorem_battery(cfg, budget());
  std::size_t violations = 0;
  double worst = 0.0;
  for (const auto& t : trials) {
    if (!t.report.satisfied) ++violations;
    worst = std::max(worst, t.report.max_err / t.report.bound);
  }
  return {violations == 0 && trials.size() == 150,
          fmt("%zu trials, %zu violations, worst err/bound %.3g", trials.size(), violations, worst)};
}

Result decay_sweep_check() {
  const std::vector<Eigen::Index> Ks = [] {
    std::vector<Eigen::Index> v;
    for (Eigen::Index k = 1; k <= 30; ++k) v.push_back(k);
    return v;
  }();
  const FilterBank bank = compute_filterbank(256, 30, HankelVariant::Primary);
  KSweepOptions opts;
  const auto rows = k_sweep(sec31_fixture(), Ks, bank, opts, budget());
  std::map<Eigen::Index, double> err;
  for (const auto& r : rows) err[r.K] = r.final_error;
  const double ratio = err[15] / err[5];
  double sk = 0, se = 0, skk = 0, ske = 0, n = 0;
  for (Eigen::Index k = 4; k <= 15; ++k) {
    const double le = std::log(err[k]);
    sk += k;
    se += le;
    skk += double(k) * k;
    ske += k * le;
    n += 1;
  }
  const double slope = (n * ske - sk * se) / (n * skk - sk * sk);
  double plateau = 0.0;
  for (Eigen::Index k = 16; k <= 30; ++k) plateau = std::max(plateau, std::abs(err[k] - err[k - 1]) / err[k - 1]);
  const bool pass = ratio <= 0.1 && slope < 0 && plateau < 0.1;
  return {pass, fmt("error(15)/error(5) %.3g, ln-error slope over [4,15] %.3f, max relative change for K>=15 %.3g",
                    ratio, slope, plateau)};
}

Result ar_check() {
  const auto checks = ar_battery(20, 200, 6, 0.99, 0, budget());
  double worst = 0.0;
  for (const auto& c : checks) worst = std::max(worst, c.rel_err);
  return {checks.size() == 20 && worst <= 1e-8, fmt("20 systems, max relative error %.3g", worst)};
}

Result spectral_decay_check() {
  // Values under the solver's backward-error floor are roundoff, not spectrum.
  std::size_t resolved = 0, violations = 0, noise = 0, noise_above = 0;
  for (Eigen::Index L : {64, 256, 1024}) {
    const Vector s = hankel_spectrum(L, HankelVariant::Primary);
    const double floor = spectrum_noise_floor(L, s(0));
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      const bool above = s(j) > spectral_decay_bound(j + 1, L);
      if (s(j) > floor) {
        ++resolved;
        if (above) ++violations;
      } else {
        ++noise;
        if (above) ++noise_above;
      }
    }
  }
  return {violations == 0,
          fmt("%zu resolved eigenvalues at L in {64,256,1024}, %zu above the envelope; %zu values under the "
              "L*eps*sigma_max floor (%zu of them above the envelope)",
              resolved, violations, noise, noise_above)};
}

Result oracle_check() {
  double worst_fft = 0.0;
  for (Eigen::Index L : {1, 2, 3, 16, 128, 512})
    for (Eigen::Index K : {1, 8, 24}) {
      if (K > L) continue;
      const FilterBank bank = compute_filterbank(L, K, HankelVariant::Primary);
      Rng rng(static_cast<std::uint64_t>(L * 100 + K));
      SequenceBatch in;
      in.items.push_back(rng.normal_matrix(L, 3));
      for (auto scaling : {FeatureScaling::Raw, FeatureScaling::Scaled}) {
        const auto fast = featurize(bank, in, scaling);
        const auto slow = naive_featurize(bank, in, scaling);
        worst_fft = std::max({worst_fft, testutil::max_abs_diff(fast[0].plus, slow[0].plus),
                              testutil::max_abs_diff(fast[0].minus, slow[0].minus)});
      }
    }
  double worst_quad = 0.0;
  using boost::math::quadrature::gauss_kronrod;
  for (auto v : {HankelVariant::Primary, HankelVariant::Alternative}) {
    const double lo = v == HankelVariant::Primary ? 0.0 : -1.0;
    for (long i = 1; i <= 8; ++i)
      for (long j = 1; j <= 8; ++j) {
        auto f = [&](double a) {
          const Vector mu = mu_vector(a, 8, v).values;
          return mu(i - 1) * mu(j - 1);
        };
        const double integral = gauss_kronrod<double, 15>::integrate(f, lo, 1.0, 15, 1e-13);
        worst_quad = std::max(worst_quad, std::abs(integral - hankel_entry(i, j, v)));
      }
  }
  return {worst_fft <= 1e-10 && worst_quad <= 1e-8,
          fmt("FFT vs naive max diff %.3g; quadrature max diff %.3g", worst_fft, worst_quad)};
}

// First step whose full-dataset loss is at or below `target`, or npos.
std::size_t steps_to_reach(const TrainReport& r, double target) {
  for (const auto& [step, loss] : r.eval_curve)
    if (loss <= target) return step;
  return std::numeric_limits<std::size_t>::max();
}

std::string steps_str(std::size_t s) {
  return s == std::numeric_limits<std::size_t>::max() ? std::string("never") : std::to_string(s);
}

Result training_direction_check() {
  const LdsParams lds = sec31_fixture();
  const auto data = lds_dataset(lds, 32, 256, 0);
  const FilterBank bank = compute_filterbank(256, 25, HankelVariant::Primary);

  TrainConfig stu_cfg;
  stu_cfg.learning_rate = 1e-2;
  stu_cfg.steps = 2000;
  stu_cfg.schedule = LrSchedule::WarmupCosine;
  stu_cfg.eval_every = 50;
  const TrainReport stu = fit_stu(data, bank, 25, 0, stu_cfg);
  const double target = stu.final_loss;
  const bool stu_ok = stu.final_loss <= 0.01 * stu.initial_loss;
  const std::size_t stu_steps = std::min(steps_to_reach(stu, target), stu_cfg.steps);

  TrainConfig lru_cfg = stu_cfg;
  lru_cfg.steps = 4000;
  const TrainReport lru = fit_lru(data, 16, lru_cfg, LruOptions{});
  const bool lru_reduces = lru.final_loss * 10.0 <= lru.initial_loss;
  const std::size_t lru_steps = steps_to_reach(lru, target);
  const bool lru_slower = lru_steps > stu_steps;

  TrainConfig bad_cfg = stu_cfg;
  bad_cfg.learning_rate = 0.1;
  bad_cfg.steps = 2000;
  std::string bad_outcome;
  bool bad_fails = true;
  try {
    const TrainReport bad = fit_lru(data, 16, bad_cfg, LruOptions::none());
    bad_fails = !(bad.final_loss <= target) && steps_to_reach(bad, target) == std::numeric_limits<std::size_t>::max();
    bad_outcome = bad.converged ? fmt("final %.3g", bad.final_loss) : "diverged: " + bad.diagnostic;
  } catch (const NonFiniteLoss& e) {
    bad_outcome = std::string("diverged: ") + e.what();
  }
  return {stu_ok && lru_reduces && lru_slower && bad_fails,
          fmt("STU %.3g -> %.3g (%.2g%%), reaches it at step %zu; LRU %.3g -> %.3g, reaches it at step %s; "
              "LRU without interventions at lr 0.1: %s",
              stu.initial_loss, stu.final_loss, 100.0 * stu.final_loss / stu.initial_loss, stu_steps, lru.initial_loss,
              lru.final_loss, steps_str(lru_steps).c_str(), bad_outcome.c_str())};
}

Result gradient_check() {
  double worst_stack = 0.0, worst_stu = 0.0, worst_lru = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    StackConfig c;
    c.n_layers = 2;
    c.d_model = 4;
    c.K = 4;
    c.d_input = 2;
    c.n_classes = 3;
    c.L = 16;
    c.k_y = seed % 2 == 0 ? 0 : 2;
    c.pooling = seed % 3 == 0 ? Pooling::Last : Pooling::Mean;
    auto bank = std::make_shared<const FilterBank>(compute_filterbank(16, 4, HankelVariant::Primary));
    StackModel m = StackModel::random(c, bank, seed);
    Rng rng(100 + seed);
    Vector theta = m.pack() + 0.2 * testutil::random_vector(m.parameter_count(), rng);
    m.unpack(theta);
    SequenceBatch in;
    for (int i = 0; i < 3; ++i) in.items.push_back(rng.normal_matrix(16, 2));
    const std::vector<int> labels{0, 2, 1};
    const Vector g = stack_gradients(m, in, labels).grad;
    const Vector fd = testutil::fd_gradient(
        [&](const Vector& v) {
          StackModel q = m;
          q.unpack(v);
          return stack_loss(q, in, labels);
        },
        theta);
    worst_stack = std::max(worst_stack, testutil::rel_err(g, fd));

    const LdsParams lds = random_symmetric_system(3, 2, 2, 0.95, seed);
    const auto data = lds_dataset(lds, 2, 16, seed);
    const FilterBank sbank = compute_filterbank(16, 4, HankelVariant::Primary);
    const StuProblem problem(sbank, 4, data);
    StuParams p = StuParams::zeros(HankelVariant::Primary, 4, 2, 2, seed % 2 == 0 ? 0 : 2);
    const Vector pv = 0.3 * testutil::random_vector(p.pack().size(), rng);
    p.unpack(pv);
    const Vector sg = stu_loss_and_gradient(p, problem).second;
    const Vector sfd = testutil::fd_gradient(
        [&](const Vector& v) {
          StuParams q = p;
          q.unpack(v);
          return stu_loss_and_gradient(q, problem).first;
        },
        pv);
    worst_stu = std::max(worst_stu, testutil::rel_err(sg, sfd));

    const LruOptions opts = seed % 2 == 0 ? LruOptions{} : LruOptions::none();
    const LruParams lp = lru_init(4, 2, 2, opts, seed);
    const Vector lv = lp.pack();
    const Vector lg = lru_loss_and_gradient(lp, data).second;
    const Vector lfd = testutil::fd_gradient(
        [&](const Vector& v) {
          LruParams q = lp;
          q.unpack(v);
          return lru_loss_and_gradient(q, data).first;
        },
        lv);
    worst_lru = std::max(worst_lru, testutil::rel_err(lg, lfd));
  }
  return {std::max({worst_stack, worst_stu, worst_lru}) <= 1e-5,
          fmt("10 seeds, max relative error: stack %.3g, STU %.3g, LRU %.3g", worst_stack, worst_stu, worst_lru)};
}

Result complexity_check() {
  median_featurize_seconds(2048, 24, 8, 1, 2, 0);  // warm caches and FFTW plans
  const double t2048 = median_featurize_seconds(2048, 24, 8, 1, 5, 1);
  const double t4096 = median_featurize_seconds(4096, 24, 8, 1, 5, 2);
  const double ratio = t4096 / t2048;
  return {ratio <= 2.6, fmt("median featurize %.4g s at L=2048, %.4g s at L=4096, ratio %.3f", t2048, t4096, ratio)};
}

Result stack_check() {
  TaskConfig small;
  small.length = 64;
  small.delay = 32;
  small.n_train = 8;
  small.n_test = 8;
  StackConfig sc;
  sc.n_layers = 2;
  sc.d_model = 8;
  sc.K = 8;
  TrainConfig stc;
  stc.learning_rate = 1e-2;
  stc.steps = 150;
  stc.batch_size = 8;
  const StackTrainResult overfit = train_stack(small, sc, stc, budget());

  TaskConfig recall;
  recall.length = 256;
  recall.delay = 128;
  recall.n_train = 1024;
  recall.n_test = 256;
  StackConfig rc;
  rc.n_layers = 1;
  rc.d_model = 8;
  rc.K = 16;
  rc.pooling = Pooling::Last;
  TrainConfig rtc;
  rtc.learning_rate = 3e-3;
  rtc.steps = 800;
  rtc.batch_size = 16;
  rtc.schedule = LrSchedule::WarmupCosine;
  const StackTrainResult rec = train_stack(recall, rc, rtc, budget());
  return {overfit.report.final_loss <= 0.01 && rec.test_accuracy >= 0.9,
          fmt("8-example full-batch loss %.3g; delayed_recall (L=256, delay 128) test accuracy %.3f",
              overfit.report.final_loss, rec.test_accuracy)};
}

}  // namespace

int main() {
#ifdef __GLIBC__
  // Same allocator settings as the CLI, so timings exclude per-call page faults.
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
#endif
  struct Criterion {
    int id;
    const char* name;
    double max_seconds;  // 0: no runtime limit
    std::function<Result()> check;
  };
  const std::vector<Criterion> criteria{
      {1, "approximation bound on 50 random symmetric systems", 120, theorem_battery_check},
      {2, "exponential error decay in K on the fixture", 60, decay_sweep_check},
      {3, "AR representation exactness", 10, ar_check},
      {4, "Hankel spectral decay envelope", 60, spectral_decay_check},
      {5, "FFT featurization and quadrature oracles", 0, oracle_check},
      {6, "STU vs LRU training direction", 600, training_direction_check},
      {7, "gradient fidelity", 0, gradient_check},
      {8, "featurize time doubling L", 0, complexity_check},
      {9, "stacked model overfit and delayed recall", 0, stack_check},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    try {
      r = c.check();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.max_seconds > 0 && secs > c.max_seconds) {
      r.pass = false;
      r.detail += fmt("; runtime %.1f s exceeds %.0f s", secs, c.max_seconds);
    }
    std::printf("%s criterion %d: %s | %s | %.1f s\n", r.pass ? "PASS" : "FAIL", c.id, c.name, r.detail.c_str(), secs);
    std::fflush(stdout);
    if (!r.pass) ++failures;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
