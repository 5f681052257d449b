#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sssm/types.hpp"

namespace sssm {

/// Linear dynamical system  x_t = A x_{t-1} + B u_t,  y_t = C x_t + D u_t.
///
/// A is held either as its diagonal or as a dense symmetric matrix.
struct LdsParams {
  enum class Storage { Diagonal, Dense };

  Storage storage = Storage::Diagonal;
  Vector a_diag;   // Storage::Diagonal
  Matrix a_dense;  // Storage::Dense
  Matrix B;        // d_h x d_in
  Matrix C;        // d_out x d_h
  Matrix D;        // d_out x d_in

  static LdsParams diagonal(Vector a, Matrix b, Matrix c, Matrix d);
  static LdsParams dense(Matrix a, Matrix b, Matrix c, Matrix d);

  Eigen::Index hidden_dim() const { return B.rows(); }
  Eigen::Index input_dim() const { return B.cols(); }
  Eigen::Index output_dim() const { return C.rows(); }

  /// A as a dense matrix regardless of storage.
  Matrix A() const;
  /// A x without materializing a diagonal A.
  Vector apply_A(const Vector& x) const;

  /// Dimension consistency and, for dense storage, |A - A^T|_max <= 1e-12.
  void validate() const;
  /// Max |eigenvalue| of the symmetric A.
  double spectral_radius() const;
};

/// Output of one sequence (rows = time) from the exact recurrence.
Matrix simulate_sequence(const LdsParams& params, const Matrix& inputs,
                         const std::optional<Vector>& x0 = std::nullopt);

/// Hidden states x_1..x_T (rows = time) for one sequence.
Matrix simulate_states(const LdsParams& params, const Matrix& inputs,
                       const std::optional<Vector>& x0 = std::nullopt);

SequenceBatch simulate_lds(const LdsParams& params, const SequenceBatch& inputs,
                           const std::optional<Vector>& x0 = std::nullopt);

/// Diagonal A with entries rho * (random sign); B, C i.i.d. N(0,1); D
/// rectangular-diagonal with N(0,1) entries. Deterministic in `seed`.
LdsParams random_marginal_system(Eigen::Index d_h, Eigen::Index d_in, Eigen::Index d_out, double rho,
                                 std::uint64_t seed);

/// Dense symmetric A = Q diag(lambda) Q^T with Q a random orthogonal matrix and
/// lambda uniform on [-radius, radius]; B, C, D i.i.d. N(0,1) scaled by `scale`.
LdsParams random_symmetric_system(Eigen::Index d_h, Eigen::Index d_in, Eigen::Index d_out, double radius,
                                  std::uint64_t seed, double scale = 1.0);

/// Random orthogonal matrix (QR of a Gaussian matrix, sign-fixed).
Matrix random_orthogonal(Eigen::Index n, std::uint64_t seed);

/// [M_0 = D, M_1 = CB, M_2 = CAB, ..., M_h = C A^{h-1} B].
std::vector<Matrix> markov_params(const LdsParams& params, Eigen::Index horizon);

/// Output from Markov parameters: y_t = M_0 u_t + sum_{i>=1} M_i u_{t-i+1}.
/// Requires horizon >= T so the sum is untruncated.
Matrix apply_markov(const std::vector<Matrix>& markov, const Matrix& inputs);

/// I.i.d. standard normal inputs, one (length x channels) matrix per item.
SequenceBatch gaussian_inputs(std::size_t batch, Eigen::Index length, Eigen::Index channels, std::uint64_t seed);

// System fixtures: JSON with row-major nested arrays and a
// `storage: diagonal|dense` discriminator for A.

LdsParams lds_from_json(const std::string& text);
std::string lds_to_json(const LdsParams& params);
LdsParams load_lds(const std::filesystem::path& path);
void save_lds(const LdsParams& params, const std::filesystem::path& path);

/// The printed 4-state / 3-input / 3-output marginally-stable system used
/// for the synthetic LDS experiments (A = diag(-0.9999, 0.9999, -0.9999, 0.9999)).
LdsParams sec31_fixture();

}  // namespace sssm
