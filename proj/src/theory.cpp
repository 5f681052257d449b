#include "sssm/theory.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "sssm/io.hpp"
#include "sssm/rng.hpp"
#include "sssm/symmetric_eigen.hpp"

namespace sssm {

double theorem_constant(HankelVariant variant) { return variant == HankelVariant::Primary ? 2e6 : 1e6; }

double theorem_bound(const TheoremBoundInputs& inp) {
  const double L = static_cast<double>(inp.L);
  const double rate = std::numbers::pi * std::numbers::pi / 4.0;
  return inp.c_const * inp.b_col * inp.c_col * L * L * L * inp.a *
         std::exp(-rate * static_cast<double>(inp.K) / std::log(L));
}

double max_column_norm(const Matrix& m) { return m.colwise().norm().maxCoeff(); }

ModalForm modal_form(const LdsParams& lds) {
  lds.validate();
  ModalForm out;
  if (lds.storage == LdsParams::Storage::Diagonal) {
    out.alpha = lds.a_diag;
    out.B = lds.B;
    out.C = lds.C;
  } else {
    const SymmetricEigen eig = symmetric_eigen(lds.a_dense, true);
    out.alpha = eig.values;
    out.B = eig.vectors.transpose() * lds.B;
    out.C = lds.C * eig.vectors;
  }
  require(out.alpha.cwiseAbs().maxCoeff() <= 1.0 + 1e-12, "theorem construction: spectral radius of A exceeds 1");
  // Roundoff at the unit circle must not push alpha out of mu's domain.
  out.alpha = out.alpha.cwiseMax(-1.0).cwiseMin(1.0);
  return out;
}

namespace {

StuParams with_autoregressive_part(const LdsParams& lds, HankelVariant variant, Eigen::Index K) {
  StuParams p = StuParams::zeros(variant, K, lds.input_dim(), lds.output_dim());
  const Matrix cb = lds.C * lds.B;
  Matrix ab = lds.B;
  for (Eigen::Index j = 0; j < ab.cols(); ++j) ab.col(j) = lds.apply_A(lds.B.col(j));
  p.M_u[0] = cb + lds.D;
  p.M_u[1] = lds.C * ab;
  p.M_u[2] = -lds.D;
  return p;
}

double inverse_quarter_root(double sigma) { return sigma > 0.0 ? std::pow(sigma, -0.25) : 0.0; }

}  // namespace

StuParams stu_from_lds(const LdsParams& lds, const FilterBank& bank, Eigen::Index K) {
  require(bank.variant == HankelVariant::Primary, "stu_from_lds: requires a Primary filter bank");
  require(K >= 1 && K <= bank.K, "stu_from_lds: K exceeds the filter bank");
  const ModalForm modal = modal_form(lds);
  StuParams p = with_autoregressive_part(lds, HankelVariant::Primary, K);
  for (Eigen::Index l = 0; l < modal.alpha.size(); ++l) {
    const double alpha = modal.alpha(l);
    const double mag = std::abs(alpha);
    const Vector mu = mu_vector(mag, bank.L, HankelVariant::Primary).values;
    const Matrix outer = modal.C.col(l) * modal.B.row(l);
    auto& target = alpha >= 0.0 ? p.M_phi_plus : p.M_phi_minus;
    for (Eigen::Index k = 0; k < K; ++k) {
      const double coeff = (mag + 1.0) * mu.dot(bank.phi.col(k)) * inverse_quarter_root(bank.sigma(k));
      target[static_cast<std::size_t>(k)] += coeff * outer;
    }
  }
  return p;
}

StuParams alt_stu_from_lds(const LdsParams& lds, const FilterBank& bank, Eigen::Index K) {
  require(bank.variant == HankelVariant::Alternative, "alt_stu_from_lds: requires an Alternative filter bank");
  require(K >= 1 && K <= bank.K, "alt_stu_from_lds: K exceeds the filter bank");
  const ModalForm modal = modal_form(lds);
  StuParams p = with_autoregressive_part(lds, HankelVariant::Alternative, K);
  for (Eigen::Index l = 0; l < modal.alpha.size(); ++l) {
    const Vector mu = mu_vector(modal.alpha(l), bank.L, HankelVariant::Alternative).values;
    const Matrix outer = modal.C.col(l) * modal.B.row(l);
    for (Eigen::Index k = 0; k < K; ++k) {
      const double coeff = mu.dot(bank.phi.col(k)) * inverse_quarter_root(bank.sigma(k));
      p.M_phi_plus[static_cast<std::size_t>(k)] += coeff * outer;
    }
  }
  return p;
}

Vector characteristic_polynomial(const LdsParams& lds) {
  lds.validate();
  const Eigen::Index d = lds.hidden_dim();
  Vector poly = Vector::Zero(d + 1);
  poly(0) = 1.0;  // running product, lowest degree first
  if (lds.storage == LdsParams::Storage::Diagonal) {
    for (Eigen::Index l = 0; l < d; ++l) {
      // poly *= (z - a_l)
      for (Eigen::Index i = l + 1; i >= 1; --i) poly(i) = poly(i - 1) - lds.a_diag(l) * poly(i);
      poly(0) = -lds.a_diag(l) * poly(0);
    }
    return poly;
  }
  // Faddeev-LeVerrier: M_k = A M_{k-1} + c_{d-k+1} I, c_{d-k} = -tr(A M_k) / k.
  const Matrix& a = lds.a_dense;
  poly(d) = 1.0;
  Matrix m = Matrix::Zero(d, d);
  for (Eigen::Index k = 1; k <= d; ++k) {
    m = a * m + poly(d - k + 1) * Matrix::Identity(d, d);
    poly(d - k) = -(a * m).trace() / static_cast<double>(k);
  }
  return poly;
}

ArRepresentation ar_coefficients(const LdsParams& lds) {
  const Eigen::Index d = lds.hidden_dim();
  require(d >= 1, "ar_coefficients: hidden dimension must be positive");
  const Vector p = characteristic_polynomial(lds);
  // x_t = A x_{t-1} + B u_t puts CB on the current input, so the impulse
  // response is h_0 = D + CB, h_j = C A^j B.
  const auto markov = markov_params(lds, d + 1);
  std::vector<Matrix> h(markov.begin() + 1, markov.end());
  h[0] += markov[0];
  ArRepresentation ar;
  ar.alpha.resize(d);
  for (Eigen::Index i = 1; i <= d; ++i) ar.alpha(i - 1) = -p(d - i);
  ar.gamma.reserve(static_cast<std::size_t>(d + 1));
  for (Eigen::Index j = 0; j <= d; ++j) {
    Matrix g = h[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 1; i <= j; ++i) g += p(d - i) * h[static_cast<std::size_t>(j - i)];
    ar.gamma.push_back(std::move(g));
  }
  return ar;
}

Matrix ar_simulate(const ArRepresentation& ar, const Matrix& inputs) {
  const Eigen::Index T = inputs.rows();
  const Eigen::Index d = ar.alpha.size();
  require(static_cast<Eigen::Index>(ar.gamma.size()) == d + 1, "ar_simulate: need d + 1 Gamma matrices");
  require(inputs.cols() == ar.gamma.front().cols(), "ar_simulate: input channels do not match Gamma");
  Matrix y = Matrix::Zero(T, ar.gamma.front().rows());
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index i = 1; i <= std::min(d, t); ++i) y.row(t) += ar.alpha(i - 1) * y.row(t - i);
    for (Eigen::Index j = 0; j <= std::min(d, t); ++j)
      y.row(t) += inputs.row(t - j) * ar.gamma[static_cast<std::size_t>(j)].transpose();
  }
  return y;
}

std::vector<ArCheck> ar_battery(std::size_t systems, Eigen::Index length, Eigen::Index max_d, double radius,
                                std::uint64_t seed, const ThreadBudget& budget) {
  require(systems >= 1 && length >= 1 && max_d >= 1, "ar_battery: sizes must be positive");
  std::vector<ArCheck> out(systems);
  parallel_for(
      systems,
      [&](std::size_t s) {
        const std::uint64_t sys_seed = seed * 1000003ULL + s;
        Rng rng(sys_seed);
        const auto d = static_cast<Eigen::Index>(1 + rng.below(static_cast<std::uint64_t>(max_d)));
        const Eigen::Index d_in = 1 + static_cast<Eigen::Index>(rng.below(3));
        const Eigen::Index d_out = 1 + static_cast<Eigen::Index>(rng.below(3));
        LdsParams lds = random_symmetric_system(d, d_in, d_out, radius, sys_seed);
        if (s % 2 == 0) {
          Vector a(d);
          for (Eigen::Index i = 0; i < d; ++i) a(i) = rng.uniform(-radius, radius);
          lds = LdsParams::diagonal(a, lds.B, lds.C, lds.D);
        }
        const Matrix u = gaussian_inputs(1, length, d_in, sys_seed + 1)[0];
        const Matrix y = simulate_sequence(lds, u);
        const Matrix y_ar = ar_simulate(ar_coefficients(lds), u);
        const double scale = y.rowwise().norm().maxCoeff();
        out[s] = {sys_seed, d, (y_ar - y).rowwise().norm().maxCoeff() / scale};
      },
      budget);
  return out;
}

std::string ApproximationReport::to_json() const {
  nlohmann::json j = {{"max_err", max_err},
                      {"bound", bound},
                      {"satisfied", satisfied},
                      {"a", a},
                      {"b_col", b_col},
                      {"c_col", c_col},
                      {"c_const", c_const},
                      {"bound_variant", to_string(bound_variant)},
                      {"K", K},
                      {"L", L},
                      {"per_t_err", std::vector<double>(per_t_err.data(), per_t_err.data() + per_t_err.size())}};
  return j.dump(2);
}

ApproximationReport approximation_report(const LdsParams& lds, const StuParams& stu, const FilterBank& bank,
                                         const SequenceBatch& inputs) {
  ApproximationReport r;
  r.K = stu.K;
  r.L = bank.L;
  r.bound_variant = bank.variant;
  r.c_const = theorem_constant(bank.variant);
  r.b_col = max_column_norm(lds.B);
  r.c_col = max_column_norm(lds.C);
  r.per_t_err = Vector::Zero(inputs.max_length());
  for (const auto& u : inputs.items) {
    const Matrix y_lds = simulate_sequence(lds, u);
    const Matrix y_stu = stu_forward_sequence(stu, bank, u);
    for (Eigen::Index t = 0; t < u.rows(); ++t) {
      r.per_t_err(t) = std::max(r.per_t_err(t), (y_lds.row(t) - y_stu.row(t)).norm());
      r.a = std::max(r.a, u.row(t).norm());
    }
  }
  r.max_err = r.per_t_err.size() ? r.per_t_err.maxCoeff() : 0.0;
  r.bound = theorem_bound({r.K, r.L, r.a, r.b_col, r.c_col, r.c_const});
  r.satisfied = r.max_err <= r.bound;
  return r;
}

SequenceBatch bounded_inputs(std::size_t batch, Eigen::Index length, Eigen::Index channels, std::uint64_t seed) {
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  SequenceBatch out;
  for (std::size_t b = 0; b < batch; ++b) {
    Matrix u(length, channels);
    for (Eigen::Index t = 0; t < length; ++t)
      for (Eigen::Index c = 0; c < channels; ++c) u(t, c) = scale * rng.uniform(-1.0, 1.0);
    out.items.push_back(std::move(u));
  }
  return out;
}

std::vector<KSweepRow> theory_k_sweep(const LdsParams& lds, const std::vector<Eigen::Index>& K_values,
                                      const SequenceBatch& inputs, HankelVariant variant) {
  require(!K_values.empty(), "theory_k_sweep: no K values");
  const Eigen::Index L = inputs.max_length();
  const Eigen::Index kmax = *std::max_element(K_values.begin(), K_values.end());
  const FilterBank bank = compute_filterbank(L, kmax, variant);
  std::vector<KSweepRow> rows;
  for (const Eigen::Index K : K_values) {
    const StuParams p = variant == HankelVariant::Primary ? stu_from_lds(lds, bank, K) : alt_stu_from_lds(lds, bank, K);
    const auto rep = approximation_report(lds, p, bank, inputs);
    rows.push_back({K, rep.max_err, rep.bound});
  }
  return rows;
}

std::string k_sweep_csv(const std::vector<KSweepRow>& rows) {
  std::ostringstream os;
  os << "K,max_err,bound\n";
  for (const auto& r : rows) os << r.K << ',' << io::format_real(r.max_err) << ',' << io::format_real(r.bound) << '\n';
  return os.str();
}

std::vector<BatteryTrial> theorem_battery(const BatteryConfig& cfg, const ThreadBudget& budget) {
  require(cfg.systems >= 1 && !cfg.K_values.empty(), "theorem_battery: need systems and K values");
  const Eigen::Index kmax = *std::max_element(cfg.K_values.begin(), cfg.K_values.end());
  const FilterBank bank = compute_filterbank(cfg.L, kmax, cfg.variant);
  std::vector<BatteryTrial> trials(cfg.systems * cfg.K_values.size());
  parallel_for(
      cfg.systems,
      [&](std::size_t s) {
        const std::uint64_t seed = cfg.seed * 1000003ULL + s;
        Rng rng(seed);
        const auto d_h = static_cast<Eigen::Index>(1 + rng.below(static_cast<std::uint64_t>(cfg.max_hidden)));
        // Every other system gets an eigenvalue pinned to +-1 (marginal stability).
        LdsParams lds = random_symmetric_system(d_h, cfg.d_in, cfg.d_out, 1.0, seed);
        if (s % 2 == 1) {
          const Matrix q = random_orthogonal(d_h, seed + 17);
          Vector lambda(d_h);
          for (Eigen::Index i = 0; i < d_h; ++i) lambda(i) = rng.uniform(-1.0, 1.0);
          lambda(0) = (s % 4 == 1) ? 1.0 : -1.0;
          Matrix a = q * lambda.asDiagonal() * q.transpose();
          lds.a_dense = 0.5 * (a + a.transpose());
        }
        const SequenceBatch inputs = bounded_inputs(1, cfg.L, cfg.d_in, seed + 1);
        for (std::size_t ki = 0; ki < cfg.K_values.size(); ++ki) {
          const Eigen::Index K = cfg.K_values[ki];
          const StuParams p =
              cfg.variant == HankelVariant::Primary ? stu_from_lds(lds, bank, K) : alt_stu_from_lds(lds, bank, K);
          BatteryTrial& trial = trials[s * cfg.K_values.size() + ki];
          trial.seed = seed;
          trial.d_h = d_h;
          trial.report = approximation_report(lds, p, bank, inputs);
        }
      },
      budget);
  return trials;
}

}  // namespace sssm
