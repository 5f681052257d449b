#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "sssm/types.hpp"

namespace sssm {

/// Which Hankel matrix generates the filters.
///
/// Primary:     Z[i,j] = 2 / ((i+j)^3 - (i+j))
/// Alternative: Z[i,j] = ((-1)^(i+j-2) + 1) * 8 / ((i+j+3)(i+j-1)(i+j+1))
/// with 1-based i, j.
enum class HankelVariant { Primary, Alternative };

std::string to_string(HankelVariant v);
HankelVariant parse_variant(const std::string& name);

/// Closed-form Hankel entry, 1-based indices.
double hankel_entry(long i, long j, HankelVariant variant);

/// Dense L x L Hankel matrix.
Matrix hankel_matrix(Eigen::Index L, HankelVariant variant);

/// Z v without forming Z. Uses an FFT correlation for larger L.
Vector hankel_matvec(Eigen::Index L, HankelVariant variant, const Vector& v);

/// Fixed spectral filters: the top-K eigenpairs of the L x L Hankel matrix.
///
/// `sigma` is descending and clamped at zero (roundoff can push the
/// numerically-null part of the spectrum slightly negative). Column k of
/// `phi` is the unit eigenvector for sigma(k); its first non-negligible
/// entry is positive. `scaled_phi` = sigma^{1/4} phi, column-wise.
struct FilterBank {
  Eigen::Index L = 0;
  Eigen::Index K = 0;
  HankelVariant variant = HankelVariant::Primary;
  Vector sigma;
  Matrix phi;
  Matrix scaled_phi;

  /// Largest |Z phi_k - sigma_k phi_k| over k, via the matrix-free product.
  double max_residual() const;
  /// Largest |phi_i . phi_j| over i != j.
  double max_off_orthogonality() const;
};

enum class EigenMethod { Auto, Dense, Lanczos };

struct FilterBankOptions {
  EigenMethod method = EigenMethod::Auto;
  /// Auto switches from the dense solver to Lanczos above this length.
  Eigen::Index dense_limit = 1024;
};

/// Computes the top-K filters. Throws DomainError unless 1 <= K <= L and
/// ConvergenceError if the eigensolver fails.
FilterBank compute_filterbank(Eigen::Index L, Eigen::Index K, HankelVariant variant,
                              const FilterBankOptions& opts = {});

/// All L eigenvalues (descending, unclamped) from the dense solver.
Vector hankel_spectrum(Eigen::Index L, HankelVariant variant);

/// Checks the FilterBank invariants (ordering, eigen-residuals, orthogonality)
/// at tolerance `tol`; throws DomainError naming the first violation.
void validate_filterbank(const FilterBank& bank, double tol = 1e-8);

/// Impulse-response direction for a decay rate alpha.
///   Primary (alpha in [0,1]):      values[i] = (alpha - 1) alpha^(i-1)
///   Alternative (alpha in [-1,1]): values[i] = (alpha^2 - 1) alpha^(i-1)
struct MuVector {
  double alpha = 0.0;
  HankelVariant variant = HankelVariant::Primary;
  Vector values;
};

MuVector mu_vector(double alpha, Eigen::Index L, HankelVariant variant);

/// |mu(alpha) - P mu(alpha)|^2 with P the projector onto span(phi_1..phi_K).
double projection_residual(const FilterBank& bank, double alpha);

/// Constant c in |mu - P mu|^2 <= c * sum_{i>K} sigma_i: 12 (Primary), 6 (Alternative).
double projection_residual_constant(HankelVariant variant);

/// Backward-error floor L * eps * sigma_max of the dense solver; computed
/// eigenvalues below it are indistinguishable from zero.
double spectrum_noise_floor(Eigen::Index L, double sigma_max);

/// Decay envelope 235200 * exp(-(pi^2/4) j / ln L) for the j-th eigenvalue (1-based).
double spectral_decay_bound(Eigen::Index j, Eigen::Index L);

// Filter-bank cache: <dir>/meta.json + <dir>/filters.f64le (K x L, filter-major).

inline constexpr int kFilterCacheFormatVersion = 1;

void save_filterbank(const FilterBank& bank, const std::filesystem::path& dir);

/// Loads and verifies the checksum, then re-validates the eigen-residuals.
FilterBank load_filterbank(const std::filesystem::path& dir);

/// Directory name used for a bank inside a cache root.
std::string filterbank_cache_name(Eigen::Index L, Eigen::Index K, HankelVariant variant);

/// Loads the bank from `root` if present, otherwise computes and stores it.
/// With no root, falls back to $SPECTRAL_STU_CACHE, and to no caching if unset.
FilterBank cached_filterbank(Eigen::Index L, Eigen::Index K, HankelVariant variant,
                             std::optional<std::filesystem::path> root = std::nullopt);

}  // namespace sssm
