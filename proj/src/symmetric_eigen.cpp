#include "sssm/symmetric_eigen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sssm/rng.hpp"

namespace sssm {
namespace {

constexpr int kMaxQlSweeps = 60;

// Householder tridiagonalization. On exit `diag` and `off` describe the
// tridiagonal matrix (off(0) = 0) and, if `v` is accumulating, v holds the
// orthogonal transform. Follows the classical tred2 ordering (last row first).
void tridiagonalize(Matrix& v, Vector& diag, Vector& off, bool accumulate) {
  const Eigen::Index n = v.rows();
  diag.resize(n);
  off.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) diag(j) = v(n - 1, j);

  for (Eigen::Index i = n - 1; i > 0; --i) {
    double scale = 0.0;
    double h = 0.0;
    for (Eigen::Index k = 0; k < i; ++k) scale += std::abs(diag(k));
    if (scale == 0.0) {
      off(i) = diag(i - 1);
      for (Eigen::Index j = 0; j < i; ++j) {
        diag(j) = v(i - 1, j);
        v(i, j) = 0.0;
        v(j, i) = 0.0;
      }
    } else {
      for (Eigen::Index k = 0; k < i; ++k) {
        diag(k) /= scale;
        h += diag(k) * diag(k);
      }
      double f = diag(i - 1);
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      off(i) = scale * g;
      h -= f * g;
      diag(i - 1) = f - g;
      for (Eigen::Index j = 0; j < i; ++j) off(j) = 0.0;

      for (Eigen::Index j = 0; j < i; ++j) {
        f = diag(j);
        v(j, i) = f;
        g = off(j) + v(j, j) * f;
        for (Eigen::Index k = j + 1; k <= i - 1; ++k) {
          g += v(k, j) * diag(k);
          off(k) += v(k, j) * f;
        }
        off(j) = g;
      }
      f = 0.0;
      for (Eigen::Index j = 0; j < i; ++j) {
        off(j) /= h;
        f += off(j) * diag(j);
      }
      const double hh = f / (h + h);
      for (Eigen::Index j = 0; j < i; ++j) off(j) -= hh * diag(j);
      for (Eigen::Index j = 0; j < i; ++j) {
        f = diag(j);
        g = off(j);
        for (Eigen::Index k = j; k <= i - 1; ++k) v(k, j) -= (f * off(k) + g * diag(k));
        diag(j) = v(i - 1, j);
        v(i, j) = 0.0;
      }
    }
    diag(i) = h;
  }

  if (accumulate) {
    for (Eigen::Index i = 0; i < n - 1; ++i) {
      v(n - 1, i) = v(i, i);
      v(i, i) = 1.0;
      const double h = diag(i + 1);
      if (h != 0.0) {
        for (Eigen::Index k = 0; k <= i; ++k) diag(k) = v(k, i + 1) / h;
        for (Eigen::Index j = 0; j <= i; ++j) {
          double g = 0.0;
          for (Eigen::Index k = 0; k <= i; ++k) g += v(k, i + 1) * v(k, j);
          for (Eigen::Index k = 0; k <= i; ++k) v(k, j) -= g * diag(k);
        }
      }
      for (Eigen::Index k = 0; k <= i; ++k) v(k, i + 1) = 0.0;
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      diag(j) = v(n - 1, j);
      v(n - 1, j) = 0.0;
    }
    v(n - 1, n - 1) = 1.0;
  } else {
    // Without accumulation the diagonal still sits in the last row slots.
    for (Eigen::Index i = 0; i < n - 1; ++i) {
      v(n - 1, i) = v(i, i);
    }
    for (Eigen::Index j = 0; j < n; ++j) diag(j) = v(n - 1, j);
  }
  off(0) = 0.0;
}

SymmetricEigen sorted_descending(const Vector& values, const Matrix* vectors) {
  const Eigen::Index n = values.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return values(a) > values(b); });
  SymmetricEigen out;
  out.values.resize(n);
  if (vectors) out.vectors.resize(vectors->rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    out.values(j) = values(order[static_cast<std::size_t>(j)]);
    if (vectors) out.vectors.col(j) = vectors->col(order[static_cast<std::size_t>(j)]);
  }
  return out;
}

}  // namespace

void tridiagonal_ql(Vector& diag, Vector& off, Matrix* z) {
  const Eigen::Index n = diag.size();
  if (n == 0) return;
  for (Eigen::Index i = 1; i < n; ++i) off(i - 1) = off(i);
  off(n - 1) = 0.0;

  double f = 0.0;
  double tst1 = 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  for (Eigen::Index l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(diag(l)) + std::abs(off(l)));
    Eigen::Index m = l;
    while (m < n - 1 && std::abs(off(m)) > eps * tst1) ++m;
    if (m > l) {
      int sweeps = 0;
      do {
        if (++sweeps > kMaxQlSweeps) throw ConvergenceError("implicit QL did not converge", sweeps);
        double g = diag(l);
        double p = (diag(l + 1) - g) / (2.0 * off(l));
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        diag(l) = off(l) / (p + r);
        diag(l + 1) = off(l) * (p + r);
        const double dl1 = diag(l + 1);
        double h = g - diag(l);
        for (Eigen::Index i = l + 2; i < n; ++i) diag(i) -= h;
        f += h;

        p = diag(m);
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = off(l + 1);
        double s = 0.0, s2 = 0.0;
        for (Eigen::Index i = m - 1; i >= l; --i) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * off(i);
          h = c * p;
          r = std::hypot(p, off(i));
          off(i + 1) = s * r;
          s = off(i) / r;
          c = p / r;
          p = c * diag(i) - s * g;
          diag(i + 1) = h + s * (c * g + s * diag(i));
          if (z) {
            for (Eigen::Index k = 0; k < z->rows(); ++k) {
              h = (*z)(k, i + 1);
              (*z)(k, i + 1) = s * (*z)(k, i) + c * h;
              (*z)(k, i) = c * (*z)(k, i) - s * h;
            }
          }
        }
        p = -s * s2 * c3 * el1 * off(l) / dl1;
        off(l) = s * p;
        diag(l) = c * p;
      } while (std::abs(off(l)) > eps * tst1);
    }
    diag(l) += f;
    off(l) = 0.0;
  }
}

SymmetricEigen symmetric_eigen(const Matrix& a, bool want_vectors) {
  require(a.rows() == a.cols(), "symmetric_eigen: matrix must be square");
  const Eigen::Index n = a.rows();
  if (n == 0) return {};
  Matrix v = a.triangularView<Eigen::Lower>();
  v.triangularView<Eigen::StrictlyUpper>() = v.transpose();
  Vector diag, off;
  tridiagonalize(v, diag, off, want_vectors);
  tridiagonal_ql(diag, off, want_vectors ? &v : nullptr);
  return sorted_descending(diag, want_vectors ? &v : nullptr);
}

SymmetricEigen lanczos_top_k(const MatVec& apply, Eigen::Index n, Eigen::Index k, const LanczosOptions& opts) {
  require(n >= 1 && k >= 1 && k <= n, "lanczos_top_k: need 1 <= k <= n");
  Rng rng(opts.seed);
  Eigen::Index m = opts.initial_subspace > 0 ? opts.initial_subspace : std::max<Eigen::Index>(2 * k + 20, k + 40);
  m = std::min(m, n);

  int total_iterations = 0;
  for (;;) {
    Matrix basis(n, m);
    Vector alpha = Vector::Zero(m);
    Vector beta = Vector::Zero(m);  // beta(j) couples basis j-1 and j

    Vector q = Vector::Ones(n) + 1e-3 * rng.unit_vector(n);
    q.normalize();
    double scale = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      basis.col(j) = q;
      Vector w = apply(q);
      ++total_iterations;
      alpha(j) = q.dot(w);
      // Two passes of classical Gram-Schmidt against the full basis.
      for (int pass = 0; pass < 2; ++pass) {
        const Vector coeff = basis.leftCols(j + 1).transpose() * w;
        w.noalias() -= basis.leftCols(j + 1) * coeff;
      }
      scale = std::max(scale, std::abs(alpha(j)));
      if (j + 1 == m) break;
      double b = w.norm();
      if (b <= 1e-13 * std::max(scale, 1e-300)) {
        // Invariant subspace found; continue from a fresh orthogonal direction.
        w = rng.unit_vector(n);
        for (int pass = 0; pass < 2; ++pass) {
          const Vector coeff = basis.leftCols(j + 1).transpose() * w;
          w.noalias() -= basis.leftCols(j + 1) * coeff;
        }
        w.normalize();
        b = 0.0;
        q = w;
      } else {
        q = w / b;
      }
      beta(j + 1) = b;
    }

    // Rayleigh-Ritz on the projected operator (dense, so the reorthogonalized
    // coupling terms are kept exactly).
    Matrix projected(m, m);
    for (Eigen::Index j = 0; j < m; ++j) projected.col(j) = basis.transpose() * apply(basis.col(j));
    total_iterations += static_cast<int>(m);
    projected = 0.5 * (projected + projected.transpose()).eval();
    const SymmetricEigen ritz = symmetric_eigen(projected, true);

    SymmetricEigen out;
    out.values = ritz.values.head(k);
    out.vectors = basis * ritz.vectors.leftCols(k);
    bool converged = true;
    for (Eigen::Index j = 0; j < k; ++j) {
      out.vectors.col(j).normalize();
      const double res = (apply(out.vectors.col(j)) - out.values(j) * out.vectors.col(j)).norm();
      if (res > opts.tolerance * std::max(1.0, std::abs(out.values(0)))) {
        converged = false;
        break;
      }
    }
    if (converged) return out;
    if (m == n) throw ConvergenceError("Lanczos residuals above tolerance at full dimension", total_iterations);
    m = std::min(n, 2 * m);
  }
}

}  // namespace sssm
