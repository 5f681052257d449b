#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sssm/filterbank.hpp"
#include "sssm/lds.hpp"
#include "sssm/parallel.hpp"
#include "sssm/stu.hpp"

namespace sssm {

/// Inputs of the representation-theorem error bound
///   c * b_col * c_col * L^3 * a * exp(-(pi^2/4) K / ln L).
struct TheoremBoundInputs {
  Eigen::Index K = 1;
  Eigen::Index L = 2;
  double a = 1.0;       // bound on |u_t|
  double b_col = 1.0;   // max column norm of B
  double c_col = 1.0;   // max column norm of C
  double c_const = 2e6;
};

/// Universal constant for each filter variant: 2e6 (Primary), 1e6 (Alternative).
double theorem_constant(HankelVariant variant);

double theorem_bound(const TheoremBoundInputs& inp);

/// Largest Euclidean column norm.
double max_column_norm(const Matrix& m);

/// Symmetric A expressed in its eigenbasis: eigenvalues alpha_l with the
/// matching rows b_l of B and columns c_l of C, so that
/// C A^i B = sum_l alpha_l^i c_l b_l^T.
struct ModalForm {
  Vector alpha;
  Matrix B;  // rows b_l
  Matrix C;  // columns c_l
};

/// Diagonal storage is used as is; dense A is diagonalized with the dense
/// symmetric solver. Throws DomainError for asymmetric A or spectral radius
/// above 1 + 1e-12.
ModalForm modal_form(const LdsParams& lds);

/// STU parameters reproducing a symmetric marginally-stable LDS up to the
/// projection error of the top-K Primary filters.
///   M^u = (CB + D, CAB, -D)
///   M^{phi+}_k = sum_{alpha_l >= 0} (alpha_l + 1)(mu(alpha_l).phi_k) sigma_k^{-1/4} c_l b_l^T
///   M^{phi-}_k = sum_{alpha_l < 0} (|alpha_l| + 1)(mu(|alpha_l|).phi_k) sigma_k^{-1/4} c_l b_l^T
/// Filters whose eigenvalue is exactly zero get zero matrices (their scaled
/// filter vanishes, so they cannot contribute).
StuParams stu_from_lds(const LdsParams& lds, const FilterBank& bank, Eigen::Index K);

/// Alternative-filter construction: one M^phi set over all eigenvalues,
///   M^phi_k = sum_l (mu(alpha_l).phi_k) sigma_k^{-1/4} c_l b_l^T.
StuParams alt_stu_from_lds(const LdsParams& lds, const FilterBank& bank, Eigen::Index K);

/// Exact order-d autoregression y_t = sum_i alpha_i y_{t-i} + sum_j Gamma_j u_{t-j}.
struct ArRepresentation {
  Vector alpha;                // alpha_1..alpha_d
  std::vector<Matrix> gamma;   // Gamma_0..Gamma_d
};

/// Monic characteristic polynomial of A as coefficients p_0..p_d (p_d = 1).
/// Faddeev-LeVerrier for dense A, product of (z - a_l) for diagonal A.
Vector characteristic_polynomial(const LdsParams& lds);

/// alpha_i = -p_{d-i}; Gamma_j = h_j + sum_{i=1..j} p_{d-i} h_{j-i} over the
/// impulse response h_0 = D + CB, h_j = C A^j B.
ArRepresentation ar_coefficients(const LdsParams& lds);

/// Runs the AR recursion from zero history.
Matrix ar_simulate(const ArRepresentation& ar, const Matrix& inputs);

struct ArCheck {
  std::uint64_t seed = 0;
  Eigen::Index d = 0;
  double rel_err = 0.0;  // max_t |y_AR - y_LDS| / max_t |y_LDS|
};

/// Random systems with d uniform in [1, max_d]: even trials use a diagonal
/// A with entries uniform on [-radius, radius], odd trials a dense
/// symmetric A with the same spectrum range.
std::vector<ArCheck> ar_battery(std::size_t systems, Eigen::Index length, Eigen::Index max_d, double radius,
                                std::uint64_t seed, const ThreadBudget& budget = {});

struct ApproximationReport {
  double max_err = 0.0;
  Vector per_t_err;  // max over the batch of |y_LDS_t - y_STU_t|
  double bound = 0.0;
  bool satisfied = false;
  double a = 0.0;
  double b_col = 0.0;
  double c_col = 0.0;
  double c_const = 0.0;
  HankelVariant bound_variant = HankelVariant::Primary;
  Eigen::Index K = 0;
  Eigen::Index L = 0;

  std::string to_json() const;
};

/// Compares the LDS against an STU forward pass on every input sequence.
/// The bound uses the bank's variant constant, L = bank.L, the measured
/// column norms of B and C and a = max_t |u_t|.
ApproximationReport approximation_report(const LdsParams& lds, const StuParams& stu, const FilterBank& bank,
                                         const SequenceBatch& inputs);

/// Inputs with |u_t|_2 <= 1: entries uniform on [-1, 1] / sqrt(channels).
SequenceBatch bounded_inputs(std::size_t batch, Eigen::Index length, Eigen::Index channels, std::uint64_t seed);

struct KSweepRow {
  Eigen::Index K = 0;
  double max_err = 0.0;
  double bound = 0.0;
};

/// Constructive error versus K on one system (one filter bank of size max K).
std::vector<KSweepRow> theory_k_sweep(const LdsParams& lds, const std::vector<Eigen::Index>& K_values,
                                      const SequenceBatch& inputs, HankelVariant variant = HankelVariant::Primary);

std::string k_sweep_csv(const std::vector<KSweepRow>& rows);

/// One trial of the random-system battery.
struct BatteryTrial {
  std::uint64_t seed = 0;
  Eigen::Index d_h = 0;
  ApproximationReport report;
};

struct BatteryConfig {
  std::size_t systems = 50;
  Eigen::Index L = 256;
  std::vector<Eigen::Index> K_values{8, 16, 24};
  Eigen::Index max_hidden = 16;
  Eigen::Index d_in = 2;
  Eigen::Index d_out = 2;
  std::uint64_t seed = 0;
  HankelVariant variant = HankelVariant::Primary;
};

/// Random symmetric systems (d_h uniform in [1, max_hidden], spectral radius
/// <= 1), each checked at every K. Trials are ordered system-major.
std::vector<BatteryTrial> theorem_battery(const BatteryConfig& cfg, const ThreadBudget& budget = {});

}  // namespace sssm
