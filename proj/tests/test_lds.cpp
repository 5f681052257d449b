#include <doctest.h>

#include <filesystem>

#include "sssm/io.hpp"
#include "sssm/lds.hpp"
#include "test_util.hpp"

using namespace sssm;
using testutil::max_abs_diff;

namespace {

// Straightforward loop over the recurrence with a dense A.
Matrix brute_force(const LdsParams& p, const Matrix& u) {
  const Matrix A = p.A();
  Vector x = Vector::Zero(p.hidden_dim());
  Matrix y(u.rows(), p.output_dim());
  for (Eigen::Index t = 0; t < u.rows(); ++t) {
    x = A * x + p.B * u.row(t).transpose();
    y.row(t) = (p.C * x + p.D * u.row(t).transpose()).transpose();
  }
  return y;
}

LdsParams scalar_system(double a, double b, double c, double d) {
  return LdsParams::diagonal(Vector::Constant(1, a), Matrix::Constant(1, 1, b), Matrix::Constant(1, 1, c),
                             Matrix::Constant(1, 1, d));
}

}  // namespace

TEST_SUITE("lds") {
  TEST_CASE("hand-unrolled scalar system") {
    Matrix u = Matrix::Zero(4, 1);
    u(0, 0) = 1.0;
    const Matrix y = simulate_sequence(scalar_system(0.5, 1, 1, 0), u);
    CHECK(y(0, 0) == 1.0);
    CHECK(y(1, 0) == 0.5);
    CHECK(y(2, 0) == 0.25);
    CHECK(y(3, 0) == 0.125);
  }

  TEST_CASE("A = 0 is memoryless") {
    Rng rng(1);
    const LdsParams p = LdsParams::diagonal(Vector::Zero(3), rng.normal_matrix(3, 2), rng.normal_matrix(2, 3),
                                            rng.normal_matrix(2, 2));
    const Matrix u = rng.normal_matrix(20, 2);
    const Matrix y = simulate_sequence(p, u);
    CHECK(max_abs_diff(y, u * (p.C * p.B + p.D).transpose()) <= 1e-13);
    CHECK(testutil::max_abs(simulate_sequence(p, Matrix::Zero(20, 2))) == 0.0);
  }

  TEST_CASE("matches a brute-force loop for both storages") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const LdsParams dense = random_symmetric_system(5, 2, 3, 0.98, seed);
      const Matrix u = gaussian_inputs(1, 40, 2, seed)[0];
      CHECK(max_abs_diff(simulate_sequence(dense, u), brute_force(dense, u)) <= 1e-12);
      const LdsParams diag = random_marginal_system(5, 2, 3, 0.9999, seed);
      CHECK(max_abs_diff(simulate_sequence(diag, u), brute_force(diag, u)) <= 1e-12);
      const LdsParams as_dense = LdsParams::dense(diag.A(), diag.B, diag.C, diag.D);
      CHECK(max_abs_diff(simulate_sequence(as_dense, u), simulate_sequence(diag, u)) <= 1e-12);
    }
  }

  TEST_CASE("initial state") {
    const LdsParams p = scalar_system(0.5, 1, 2, 0);
    Vector x0(1);
    x0 << 4.0;
    const Matrix y = simulate_sequence(p, Matrix::Zero(3, 1), x0);
    CHECK(y(0, 0) == 4.0);
    CHECK(y(1, 0) == 2.0);
    CHECK(y(2, 0) == 1.0);
  }

  TEST_CASE("random marginal systems") {
    const LdsParams p = random_marginal_system(4, 3, 3, 0.9999, 7);
    REQUIRE(p.storage == LdsParams::Storage::Diagonal);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(std::abs(p.a_diag(i)) == 0.9999);
    CHECK(random_marginal_system(4, 3, 3, 1.0, 7).spectral_radius() == 1.0);
    const LdsParams q = random_marginal_system(4, 3, 3, 0.9999, 7);
    CHECK(max_abs_diff(p.a_diag, q.a_diag) == 0.0);
    CHECK(max_abs_diff(p.B, q.B) == 0.0);
    CHECK(max_abs_diff(p.C, q.C) == 0.0);
    CHECK(max_abs_diff(p.D, q.D) == 0.0);
    // Rectangular-diagonal D when the channel counts differ.
    const LdsParams r = random_marginal_system(3, 2, 4, 0.9, 1);
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = 0; j < 2; ++j)
        if (i != j) CHECK(r.D(i, j) == 0.0);
  }

  TEST_CASE("random symmetric systems and orthogonal matrices") {
    const LdsParams p = random_symmetric_system(6, 2, 2, 0.9, 3);
    CHECK(max_abs_diff(p.a_dense, p.a_dense.transpose()) <= 1e-12);
    CHECK(p.spectral_radius() <= 0.9 + 1e-12);
    const Matrix Q = random_orthogonal(7, 4);
    CHECK(max_abs_diff(Q.transpose() * Q, Matrix::Identity(7, 7)) <= 1e-13);
    Matrix asym = Matrix::Zero(2, 2);
    asym(0, 1) = 0.1;
    CHECK_THROWS_AS(LdsParams::dense(asym, Matrix::Ones(2, 1), Matrix::Ones(1, 2), Matrix::Zero(1, 1)).validate(),
                    DomainError);
  }

  TEST_CASE("Markov parameters") {
    const auto m = markov_params(scalar_system(0.5, 1, 1, 0), 3);
    REQUIRE(m.size() == 4);
    CHECK(m[0](0, 0) == 0.0);
    CHECK(m[1](0, 0) == 1.0);
    CHECK(m[2](0, 0) == 0.5);
    CHECK(m[3](0, 0) == 0.25);

    Rng rng(2);
    const LdsParams zero = LdsParams::diagonal(Vector::Zero(2), rng.normal_matrix(2, 1), rng.normal_matrix(1, 2),
                                               rng.normal_matrix(1, 1));
    const auto mz = markov_params(zero, 5);
    for (std::size_t k = 2; k < mz.size(); ++k) CHECK(testutil::max_abs(mz[k]) == 0.0);

    const LdsParams p = random_symmetric_system(4, 2, 3, 0.95, 9);
    const Matrix u = gaussian_inputs(1, 64, 2, 9)[0];
    CHECK(max_abs_diff(apply_markov(markov_params(p, 64), u), simulate_sequence(p, u)) <= 1e-10);
  }

  TEST_CASE("superposition and homogeneity") {
    const LdsParams p = random_marginal_system(4, 3, 3, 0.9999, 5);
    const Matrix u1 = gaussian_inputs(1, 128, 3, 1)[0], u2 = gaussian_inputs(1, 128, 3, 2)[0];
    const Matrix y1 = simulate_sequence(p, u1), y2 = simulate_sequence(p, u2);
    CHECK(max_abs_diff(simulate_sequence(p, u1 + u2), y1 + y2) <= 1e-10);
    CHECK(max_abs_diff(simulate_sequence(p, -3.5 * u1), -3.5 * y1) <= 1e-10);
  }

  TEST_CASE("hidden state grows at most linearly for a marginal diagonal system") {
    const LdsParams p = random_marginal_system(4, 3, 3, 1.0, 8);
    Rng rng(8);
    Matrix u(1024, 3);
    for (Eigen::Index t = 0; t < u.rows(); ++t) u.row(t) = rng.unit_vector(3).transpose();  // |u_t| = 1
    const Matrix x = simulate_states(p, u);
    const double step = p.B.norm();  // Frobenius norm bounds the operator norm
    for (Eigen::Index t = 0; t < x.rows(); ++t) REQUIRE(x.row(t).norm() <= (t + 1) * step * (1 + 1e-12));
  }

  TEST_CASE("fixture file and JSON round trips") {
    const LdsParams fixture = sec31_fixture();
    const LdsParams file = load_lds(std::filesystem::path(SSSM_SOURCE_DIR) / "fixtures" / "sec31_system.json");
    CHECK(max_abs_diff(file.a_diag, fixture.a_diag) == 0.0);
    CHECK(max_abs_diff(file.B, fixture.B) == 0.0);
    CHECK(max_abs_diff(file.C, fixture.C) == 0.0);
    CHECK(max_abs_diff(file.D, fixture.D) == 0.0);
    CHECK(fixture.a_diag(0) == -0.9999);

    const LdsParams dense = random_symmetric_system(3, 2, 1, 0.5, 1);
    const LdsParams back = lds_from_json(lds_to_json(dense));
    CHECK(back.storage == LdsParams::Storage::Dense);
    CHECK(max_abs_diff(back.a_dense, dense.a_dense) == 0.0);
    CHECK(max_abs_diff(back.C, dense.C) == 0.0);
    CHECK_THROWS(lds_from_json("{\"A\": [1, 2]}"));
  }

  TEST_CASE("gaussian inputs are seeded") {
    const auto a = gaussian_inputs(3, 500, 2, 42), b = gaussian_inputs(3, 500, 2, 42), c = gaussian_inputs(3, 500, 2, 43);
    CHECK(max_abs_diff(a[2], b[2]) == 0.0);
    CHECK(max_abs_diff(a[2], c[2]) > 0.0);
    CHECK(std::abs(a[0].mean()) < 0.1);
    CHECK(std::abs(a[0].squaredNorm() / 1000 - 1.0) < 0.15);
  }
}
