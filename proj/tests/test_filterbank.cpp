#include <doctest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "sssm/filterbank.hpp"
#include "sssm/io.hpp"
#include "test_util.hpp"

using namespace sssm;
using testutil::max_abs_diff;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sssm_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("filterbank") {
  TEST_CASE("hankel entries") {
    CHECK(hankel_entry(1, 1, HankelVariant::Primary) == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(hankel_entry(1, 2, HankelVariant::Alternative) == 0.0);
    CHECK(hankel_entry(1, 1, HankelVariant::Alternative) == doctest::Approx(16.0 / 15).epsilon(1e-15));
    for (auto v : {HankelVariant::Primary, HankelVariant::Alternative})
      for (long i = 1; i <= 64; ++i)
        for (long j = 1; j <= 64; ++j) REQUIRE(hankel_entry(i, j, v) == hankel_entry(j, i, v));
  }

  TEST_CASE("matvec examples") {
    Vector one(1);
    one << 1.0;
    CHECK(hankel_matvec(1, HankelVariant::Primary, one)(0) == doctest::Approx(1.0 / 3));

    Vector e1 = Vector::Zero(8);
    e1(0) = 1.0;
    const Vector col = hankel_matvec(8, HankelVariant::Primary, e1);
    for (long j = 1; j <= 8; ++j) {
      const double s = 1.0 + j;
      CHECK(col(j - 1) == doctest::Approx(2.0 / (s * s * s - s)).epsilon(1e-13));
    }
    for (auto v : {HankelVariant::Primary, HankelVariant::Alternative})
      CHECK(hankel_matvec(37, v, Vector::Zero(37)).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("matrix-free product agrees with dense multiply") {
    Rng rng(11);
    for (auto v : {HankelVariant::Primary, HankelVariant::Alternative})
      for (Eigen::Index L = 1; L <= 128; ++L) {
        const Vector x = testutil::random_vector(L, rng);
        const Vector dense = hankel_matrix(L, v) * x;
        const Vector fast = hankel_matvec(L, v, x);
        REQUIRE((fast - dense).norm() <= 1e-12 * dense.norm());
      }
  }

  TEST_CASE("Hankel matrices are PSD") {
    Rng rng(12);
    for (auto v : {HankelVariant::Primary, HankelVariant::Alternative})
      for (int trial = 0; trial < 100; ++trial) {
        const Vector x = rng.unit_vector(64);
        REQUIRE(x.dot(hankel_matvec(64, v, x)) >= -1e-10);
      }
  }

  TEST_CASE("entries equal the integral of mu outer products") {
    using boost::math::quadrature::gauss_kronrod;
    for (auto v : {HankelVariant::Primary, HankelVariant::Alternative}) {
      const double lo = v == HankelVariant::Primary ? 0.0 : -1.0;
      for (long i = 1; i <= 8; ++i)
        for (long j = 1; j <= 8; ++j) {
          auto f = [&](double a) {
            const Vector mu = mu_vector(a, 8, v).values;
            return mu(i - 1) * mu(j - 1);
          };
          double err = 0.0;
          const double integral = gauss_kronrod<double, 15>::integrate(f, lo, 1.0, 15, 1e-12, &err);
          REQUIRE(err <= 1e-10);
          REQUIRE(std::abs(integral - hankel_entry(i, j, v)) <= 1e-10);
        }
    }
  }

  TEST_CASE("2x2 closed form") {
    const FilterBank bank = compute_filterbank(2, 2, HankelVariant::Primary);
    const double a = 1.0 / 3, b = 1.0 / 12, d = 1.0 / 30;
    const double mean = (a + d) / 2, rad = std::sqrt((a - d) * (a - d) / 4 + b * b);
    CHECK(bank.sigma(0) == doctest::Approx(mean + rad).epsilon(1e-14));
    CHECK(bank.sigma(1) == doctest::Approx(mean - rad).epsilon(1e-14));
    for (int k = 0; k < 2; ++k) {
      // Unnormalized eigenvector (b, lambda - a), then unit norm and positive first entry.
      Vector e(2);
      e << b, bank.sigma(k) - a;
      e /= e.norm();
      if (e(0) < 0) e = -e;
      CHECK(max_abs_diff(bank.phi.col(k), e) <= 1e-14);
    }
  }

  TEST_CASE("dense solver matches Eigen's self-adjoint solver") {
    for (auto v : {HankelVariant::Primary, HankelVariant::Alternative}) {
      const Eigen::Index L = 96, K = 20;
      const FilterBank bank = compute_filterbank(L, K, v);
      Eigen::SelfAdjointEigenSolver<Matrix> ref(hankel_matrix(L, v));
      for (Eigen::Index k = 0; k < K; ++k) {
        const double expect = std::max(0.0, ref.eigenvalues()(L - 1 - k));
        CHECK(std::abs(bank.sigma(k) - expect) <= 1e-14 + 1e-10 * expect);
        // Well-separated pairs only; the tail is numerically degenerate.
        if (expect > 1e-8) CHECK(std::abs(std::abs(bank.phi.col(k).dot(ref.eigenvectors().col(L - 1 - k))) - 1.0) <= 1e-8);
      }
    }
  }

  TEST_CASE("bank invariants") {
    const FilterBank bank = compute_filterbank(128, 24, HankelVariant::Primary);
    validate_filterbank(bank);
    for (Eigen::Index k = 0; k < bank.K; ++k) {
      CHECK(bank.sigma(k) >= 0.0);
      if (k > 0) CHECK(bank.sigma(k) <= bank.sigma(k - 1));
      CHECK(bank.phi.col(k).norm() == doctest::Approx(1.0).epsilon(1e-12));
      Eigen::Index first = 0;
      while (std::abs(bank.phi(first, k)) <= 1e-12) ++first;
      CHECK(bank.phi(first, k) > 0.0);
      CHECK(max_abs_diff(bank.scaled_phi.col(k), std::pow(bank.sigma(k), 0.25) * bank.phi.col(k)) <= 1e-15);
    }
    CHECK(bank.max_residual() <= 1e-12);
    CHECK(bank.max_off_orthogonality() <= 1e-12);
    CHECK_THROWS_AS(compute_filterbank(8, 9, HankelVariant::Primary), DomainError);
    CHECK_THROWS_AS(compute_filterbank(8, 0, HankelVariant::Primary), DomainError);
  }

  TEST_CASE("Lanczos and dense paths agree") {
    const Eigen::Index L = 300, K = 12;
    FilterBankOptions dense, lanczos;
    dense.method = EigenMethod::Dense;
    lanczos.method = EigenMethod::Lanczos;
    const FilterBank a = compute_filterbank(L, K, HankelVariant::Primary, dense);
    const FilterBank b = compute_filterbank(L, K, HankelVariant::Primary, lanczos);
    CHECK(max_abs_diff(a.sigma, b.sigma) <= 1e-12);
    CHECK(max_abs_diff(a.phi, b.phi) <= 1e-7);
    CHECK(b.max_residual() <= 1e-10);
  }

  TEST_CASE("eigenvalue examples and decay envelope") {
    const FilterBank bank = compute_filterbank(256, 24, HankelVariant::Primary);
    CHECK(bank.sigma(23) <= 235200.0 * std::exp(-(std::numbers::pi * std::numbers::pi / 4) * 24 / std::log(256.0)));
    CHECK(spectral_decay_bound(24, 256) ==
          doctest::Approx(235200.0 * std::exp(-(std::numbers::pi * std::numbers::pi / 4) * 24 / std::log(256.0))));

    const FilterBank alt = compute_filterbank(256, 1, HankelVariant::Alternative);
    double trace = 0.0;
    for (long i = 1; i <= 256; ++i) trace += hankel_entry(i, i, HankelVariant::Alternative);
    CHECK(alt.sigma(0) <= trace);

    // Below the solver's backward-error floor the computed values are roundoff.
    for (Eigen::Index L : {64, 256}) {
      const Vector s = hankel_spectrum(L, HankelVariant::Primary);
      const double floor = spectrum_noise_floor(L, s(0));
      for (Eigen::Index j = 0; j < L; ++j)
        if (s(j) > floor) REQUIRE(s(j) <= spectral_decay_bound(j + 1, L));
    }
  }

  TEST_CASE("mu vectors") {
    CHECK(mu_vector(1.0, 8, HankelVariant::Primary).values.cwiseAbs().maxCoeff() == 0.0);
    const Vector m0 = mu_vector(0.0, 8, HankelVariant::Primary).values;
    Vector expect = Vector::Zero(8);
    expect(0) = -1.0;
    CHECK(max_abs_diff(m0, expect) == 0.0);
    CHECK(mu_vector(-1.0, 8, HankelVariant::Alternative).values.cwiseAbs().maxCoeff() == 0.0);
    const Vector m = mu_vector(0.5, 4, HankelVariant::Primary).values;
    CHECK(m(3) == doctest::Approx(-0.5 * 0.125));
    for (double a : {0.0, 0.3, 0.9, 0.9999}) CHECK(mu_vector(a, 64, HankelVariant::Primary).values.squaredNorm() <= 1.0);
  }

  TEST_CASE("projection residual") {
    const FilterBank full = compute_filterbank(32, 32, HankelVariant::Primary);
    CHECK(projection_residual(full, 0.5) <= 1e-10);

    const FilterBank bank = compute_filterbank(64, 8, HankelVariant::Primary);
    const Vector spectrum = hankel_spectrum(64, HankelVariant::Primary);
    const double tail = spectrum.tail(56).cwiseMax(0.0).sum();
    CHECK(projection_residual(bank, 0.9999) <= projection_residual_constant(HankelVariant::Primary) * tail);
    CHECK(projection_residual_constant(HankelVariant::Primary) == 12.0);

    // Oracle: orthonormal basis from a Householder QR of the filters.
    const Matrix Q = Eigen::HouseholderQR<Matrix>(bank.phi).householderQ() * Matrix::Identity(64, 8);
    const Vector mu = mu_vector(0.5, 64, HankelVariant::Primary).values;
    const double oracle = (mu - Q * (Q.transpose() * mu)).squaredNorm();
    CHECK(std::abs(projection_residual(bank, 0.5) - oracle) <= 1e-10);
  }

  TEST_CASE("mu inner products are bounded by the quadratic form") {
    Rng rng(13);
    for (int vi = 0; vi < 20; ++vi) {
      const Vector v = rng.unit_vector(64);
      const double quad = v.dot(hankel_matvec(64, HankelVariant::Primary, v));
      for (int ai = 0; ai < 1000; ++ai) {
        const double a = rng.uniform();
        const double p = mu_vector(a, 64, HankelVariant::Primary).values.dot(v);
        REQUIRE(p * p <= 12.0 * quad + 1e-15);
      }
    }
  }

  TEST_CASE("cache round trip") {
    const auto root = scratch_dir("cache");
    const FilterBank bank = cached_filterbank(64, 6, HankelVariant::Alternative, root);
    const auto dir = root / filterbank_cache_name(64, 6, HankelVariant::Alternative);
    REQUIRE(std::filesystem::exists(dir / "meta.json"));
    REQUIRE(std::filesystem::exists(dir / "filters.f64le"));
    const FilterBank again = cached_filterbank(64, 6, HankelVariant::Alternative, root);
    CHECK(again.variant == HankelVariant::Alternative);
    CHECK(max_abs_diff(bank.phi, again.phi) == 0.0);
    CHECK(max_abs_diff(bank.sigma, again.sigma) == 0.0);
    CHECK(max_abs_diff(bank.scaled_phi, again.scaled_phi) == 0.0);

    auto bytes = io::read_bytes(dir / "filters.f64le");
    bytes[8] ^= 0x40;
    io::write_bytes(dir / "filters.f64le", bytes);
    CHECK_THROWS(load_filterbank(dir));
    std::filesystem::remove_all(root);
  }
}
