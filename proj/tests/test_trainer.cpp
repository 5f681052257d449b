#include <doctest.h>

#include <cmath>

#include "sssm/filterbank.hpp"
#include "sssm/lds.hpp"
#include "sssm/theory.hpp"
#include "sssm/trainer.hpp"
#include "test_util.hpp"

using namespace sssm;
using testutil::max_abs_diff;

namespace {

StuParams random_params(Eigen::Index K, Eigen::Index d_in, Eigen::Index d_out, Eigen::Index k_y, std::uint64_t seed,
                        double scale) {
  StuParams p = StuParams::zeros(HankelVariant::Primary, K, d_in, d_out, k_y);
  Rng rng(seed);
  p.unpack(scale * testutil::random_vector(p.parameter_count(), rng));
  return p;
}

SequenceDataset noisy_lds_data(std::size_t n, Eigen::Index L, std::uint64_t seed, double noise) {
  SequenceDataset data = lds_dataset(random_marginal_system(3, 1, 1, 0.99, seed), n, L, seed);
  Rng rng(seed + 1);
  for (auto& y : data.targets.items)
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] += noise * rng.normal();
  return data;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("learning-rate schedules") {
    TrainConfig c;
    c.learning_rate = 0.5;
    c.steps = 100;
    CHECK(scheduled_lr(c, 0) == 0.5);
    CHECK(scheduled_lr(c, 99) == 0.5);
    c.schedule = LrSchedule::WarmupCosine;
    c.warmup_frac = 0.1;
    CHECK(scheduled_lr(c, 0) < 0.5 * 0.2);
    CHECK(scheduled_lr(c, 9) == doctest::Approx(0.5));
    CHECK(scheduled_lr(c, 99) < 0.5 * 0.01);
    for (std::size_t s = 10; s < 99; ++s) CHECK(scheduled_lr(c, s + 1) <= scheduled_lr(c, s));
  }

  TEST_CASE("config validation and JSON") {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.steps = 17;
    c.optimizer = OptimizerKind::SGD;
    c.schedule = LrSchedule::WarmupCosine;
    c.seed = 99;
    const TrainConfig back = TrainConfig::from_json(c.to_json());
    CHECK(back.learning_rate == c.learning_rate);
    CHECK(back.steps == 17);
    CHECK(back.optimizer == OptimizerKind::SGD);
    CHECK(back.schedule == LrSchedule::WarmupCosine);
    CHECK(back.seed == 99);
    TrainConfig bad;
    bad.learning_rate = -1;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    bad = TrainConfig{};
    bad.warmup_frac = 1.0;
    CHECK_THROWS_AS(bad.validate(), DomainError);
  }

  TEST_CASE("mean squared error") {
    SequenceBatch a, b;
    a.items.push_back(Matrix::Ones(2, 2));
    b.items.push_back(Matrix::Zero(2, 2));
    a.items.push_back(Matrix::Zero(4, 1));
    b.items.push_back(Matrix::Constant(4, 1, 3.0));
    CHECK(mse(a, b) == doctest::Approx((1.0 + 9.0) / 2));
  }

  TEST_CASE("STU loss gradient matches central differences") {
    const FilterBank bank = compute_filterbank(16, 4, HankelVariant::Primary);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto data = lds_dataset(random_symmetric_system(3, 2, 2, 0.95, seed), 3, 16, seed);
      const StuProblem prob(bank, 4, data);
      const Eigen::Index k_y = seed % 2 == 0 ? 0 : 2;
      const StuParams p = random_params(4, 2, 2, k_y, 10 + seed, 0.2);
      const auto [loss, grad] = stu_loss_and_gradient(p, prob);
      const Vector fd = testutil::fd_gradient(
          [&](const Vector& v) {
            StuParams q = p;
            q.unpack(v);
            return stu_loss_and_gradient(q, prob).first;
          },
          p.pack());
      CHECK(loss > 0.0);
      CHECK(testutil::rel_err(grad, fd) <= 1e-5);
    }
  }

  TEST_CASE("LRU loss gradient matches central differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto data = lds_dataset(random_symmetric_system(3, 2, 2, 0.95, seed), 3, 16, seed);
      const LruOptions opts = seed % 2 == 0 ? LruOptions{} : LruOptions::none();
      const LruParams p = lru_init(4, 2, 2, opts, 20 + seed);
      const auto [loss, grad] = lru_loss_and_gradient(p, data);
      const Vector fd = testutil::fd_gradient(
          [&](const Vector& v) {
            LruParams q = p;
            q.unpack(v);
            return lru_loss_and_gradient(q, data).first;
          },
          p.pack());
      CHECK(std::isfinite(loss));
      CHECK(testutil::rel_err(grad, fd) <= 1e-5);
    }
  }

  TEST_CASE("vanilla STU loss is convex along segments") {
    const FilterBank bank = compute_filterbank(32, 4, HankelVariant::Primary);
    const auto data = noisy_lds_data(3, 32, 5, 0.1);
    const StuProblem prob(bank, 4, data);
    Rng rng(6);
    for (int pair = 0; pair < 100; ++pair) {
      StuParams a = StuParams::zeros(HankelVariant::Primary, 4, 1, 1), b = a, mid = a;
      const Vector va = testutil::random_vector(a.parameter_count(), rng);
      const Vector vb = testutil::random_vector(a.parameter_count(), rng);
      a.unpack(va);
      b.unpack(vb);
      mid.unpack(0.5 * (va + vb));
      const double la = stu_loss_and_gradient(a, prob).first, lb = stu_loss_and_gradient(b, prob).first;
      REQUIRE(stu_loss_and_gradient(mid, prob).first <= 0.5 * (la + lb) * (1 + 1e-12));
    }
  }

  TEST_CASE("least squares recovers a realizable STU") {
    const Eigen::Index L = 48, K = 4;
    const FilterBank bank = compute_filterbank(L, K, HankelVariant::Primary);
    const StuParams truth = random_params(K, 1, 1, 0, 7, 0.5);
    SequenceDataset data;
    data.inputs = gaussian_inputs(6, L, 1, 8);
    data.targets = stu_forward(truth, bank, data.inputs);
    const LeastSquaresFit fit = fit_stu_least_squares(data, bank, K);
    CHECK(fit.residual <= 1e-10);
    CHECK_FALSE(fit.ridge_used);
    CHECK(max_abs_diff(fit.params.pack(), truth.pack()) <= 1e-3);
  }

  TEST_CASE("zero targets keep zero parameters") {
    const FilterBank bank = compute_filterbank(32, 4, HankelVariant::Primary);
    SequenceDataset data;
    data.inputs = gaussian_inputs(4, 32, 2, 1);
    for (const auto& u : data.inputs.items) data.targets.items.push_back(Matrix::Zero(u.rows(), 2));
    TrainConfig c;
    c.steps = 50;
    const TrainReport r = fit_stu(data, bank, 4, 0, c);
    CHECK(r.initial_loss == 0.0);
    CHECK(r.final_loss <= 1e-20);
    for (double l : r.loss_curve) CHECK(l <= 1e-20);
    CHECK(r.loss_curve.size() == 50);
  }

  TEST_CASE("least-squares residual is within the bound on LDS data") {
    const FilterBank bank = compute_filterbank(256, 24, HankelVariant::Primary);
    const LdsParams lds = sec31_fixture();
    const auto data = lds_dataset(lds, 4, 256, 3);
    const LeastSquaresFit fit = fit_stu_least_squares(data, bank, 24);
    TheoremBoundInputs in;
    in.K = 24;
    in.L = 256;
    in.b_col = max_column_norm(lds.B);
    in.c_col = max_column_norm(lds.C);
    double a = 0.0;
    for (const auto& u : data.inputs.items)
      for (Eigen::Index t = 0; t < u.rows(); ++t) a = std::max(a, u.row(t).norm());
    in.a = a;
    CHECK(std::sqrt(fit.residual) <= theorem_bound(in));
    CHECK(fit.residual <= 1e-10);
  }

  TEST_CASE("gradient descent approaches the least-squares optimum") {
    const FilterBank bank = compute_filterbank(32, 3, HankelVariant::Primary);
    const auto data = noisy_lds_data(4, 32, 11, 0.3);
    const LeastSquaresFit ls = fit_stu_least_squares(data, bank, 3);
    TrainConfig c;
    c.learning_rate = 3e-2;
    c.steps = 100000;
    c.batch_size = 4;
    c.schedule = LrSchedule::WarmupCosine;
    const TrainReport r = fit_stu(data, bank, 3, 0, c);
    CHECK(r.final_loss >= ls.residual * (1 - 1e-9));
    CHECK(r.final_loss <= 1.01 * ls.residual);
  }

  TEST_CASE("LRU forward special cases") {
    LruParams p;
    p.stable_exp = false;
    p.gamma = GammaMode::Off;
    p.nu_log = Vector::Constant(1, 0.5);
    p.theta_log = Vector::Zero(1);
    p.B_re = Matrix::Ones(1, 1);
    p.B_im = Matrix::Zero(1, 1);
    p.C_re = Matrix::Ones(1, 1);
    p.C_im = Matrix::Zero(1, 1);
    p.D = Matrix::Zero(1, 1);
    Matrix u = Matrix::Zero(3, 1);
    u(0, 0) = 1.0;
    const Matrix y = lru_forward_sequence(p, u);
    CHECK(y(0, 0) == 1.0);
    CHECK(y(1, 0) == 0.5);
    CHECK(y(2, 0) == 0.25);

    // gamma coupling only rescales the input of each hidden coordinate.
    LruParams q = lru_init(5, 2, 2, LruOptions{}, 3);
    const Matrix in = Rng(4).normal_matrix(20, 2);
    LruParams off = q;
    off.gamma = GammaMode::Off;
    const Vector g = q.gamma_vec();
    off.B_re = g.asDiagonal() * q.B_re;
    off.B_im = g.asDiagonal() * q.B_im;
    CHECK(max_abs_diff(lru_forward_sequence(q, in), lru_forward_sequence(off, in)) <= 1e-13);
    for (Eigen::Index j = 0; j < 5; ++j) CHECK(g(j) == doctest::Approx(std::sqrt(1 - std::norm(q.lambda()(j)))));

    // Vanishing eigenvalues leave a memoryless map.
    LruParams fast = q;
    fast.nu_log.setConstant(5.0);
    fast.gamma = GammaMode::Off;
    const Matrix ym = lru_forward_sequence(fast, in);
    const Matrix expect = in * (fast.D + fast.C_re * fast.B_re - fast.C_im * fast.B_im).transpose();
    CHECK(max_abs_diff(ym, expect) <= 1e-12);
  }

  TEST_CASE("ring initialization") {
    LruOptions o;
    const LruParams p = lru_init(64, 1, 1, o, 5);
    for (Eigen::Index j = 0; j < 64; ++j) {
      const auto l = p.lambda()(j);
      CHECK(std::abs(l) >= o.min_rad - 1e-12);
      CHECK(std::abs(l) <= o.max_rad + 1e-12);
      CHECK(std::arg(l) >= -1e-12);
      CHECK(std::arg(l) <= o.max_init_phase + 1e-12);
    }
  }

  TEST_CASE("LRU training is deterministic and flags divergence") {
    const auto data = lds_dataset(sec31_fixture(), 8, 64, 2);
    TrainConfig c;
    c.steps = 40;
    c.seed = 5;
    const TrainReport a = fit_lru(data, 8, c, LruOptions{});
    const TrainReport b = fit_lru(data, 8, c, LruOptions{});
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(a.to_json() == b.to_json());

    TrainConfig hot;
    hot.learning_rate = 0.5;
    hot.steps = 400;
    const TrainReport d = fit_lru(data, 8, hot, LruOptions::none());
    CHECK_FALSE(d.converged);
    CHECK_FALSE(d.diagnostic.empty());
  }

  TEST_CASE("STU training is deterministic") {
    const FilterBank bank = compute_filterbank(64, 5, HankelVariant::Primary);
    const auto data = lds_dataset(sec31_fixture(), 6, 64, 3);
    TrainConfig c;
    c.steps = 60;
    c.seed = 9;
    const TrainReport a = fit_stu(data, bank, 5, 0, c), b = fit_stu(data, bank, 5, 0, c);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.loss_csv() == b.loss_csv());
    CHECK(a.loss_csv().rfind("step,loss\n", 0) == 0);
    CHECK(a.to_json().find("timing") == std::string::npos);
    CHECK(a.to_json(true).find("timing") != std::string::npos);
  }

  TEST_CASE("K sweep errors are non-increasing") {
    const FilterBank bank = compute_filterbank(128, 12, HankelVariant::Primary);
    KSweepOptions o;
    o.length = 128;
    o.train_sequences = 8;
    std::vector<Eigen::Index> Ks;
    for (Eigen::Index k = 1; k <= 12; ++k) Ks.push_back(k);
    const auto rows = k_sweep(sec31_fixture(), Ks, bank, o);
    REQUIRE(rows.size() == Ks.size());
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].final_error <= rows[i - 1].final_error + 1e-12);
    CHECK(k_sweep_results_csv(rows).rfind("K,final_error,ln_error\n", 0) == 0);
  }
}
