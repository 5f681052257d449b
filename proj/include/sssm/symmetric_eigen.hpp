#pragma once

#include <functional>

#include "sssm/types.hpp"

namespace sssm {

/// Eigenpairs of a real symmetric matrix, eigenvalues in descending order.
/// Column j of `vectors` pairs with `values(j)`; it is empty when only
/// eigenvalues were requested.
struct SymmetricEigen {
  Vector values;
  Matrix vectors;
};

/// Dense symmetric eigendecomposition: Householder reduction to tridiagonal
/// form followed by the implicit QL iteration with Wilkinson-style shifts.
/// Only the lower triangle of `a` is read.
///
/// Throws ConvergenceError when an eigenvalue needs more than 60 QL sweeps.
SymmetricEigen symmetric_eigen(const Matrix& a, bool want_vectors = true);

/// Implicit QL on a symmetric tridiagonal matrix (diagonal `diag`, the
/// subdiagonal in `off(1..n-1)`, `off(0)` ignored). When `z` is non-null it
/// must hold the accumulated reduction (or identity) and receives the
/// eigenvectors. Eigenvalues are returned unsorted in `diag`.
void tridiagonal_ql(Vector& diag, Vector& off, Matrix* z);

using MatVec = std::function<Vector(const Vector&)>;

struct LanczosOptions {
  /// Residual tolerance on |A v - s v| for every returned pair.
  double tolerance = 1e-10;
  /// Initial Krylov dimension; grows geometrically up to n on failure.
  int initial_subspace = 0;
  unsigned long long seed = 0x5eed;
};

/// Top-k eigenpairs of a symmetric operator through Lanczos with full
/// reorthogonalization. Invariant-subspace breakdowns restart from a fresh
/// vector orthogonal to the current basis. Throws ConvergenceError when the
/// residual tolerance is not met with the full dimension n.
SymmetricEigen lanczos_top_k(const MatVec& apply, Eigen::Index n, Eigen::Index k,
                             const LanczosOptions& opts = {});

}  // namespace sssm
