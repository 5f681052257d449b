#include "sssm/filterbank.hpp"

#include <cmath>
#include <limits>
#include <cstdlib>
#include <numbers>

#include "json.hpp"
#include "sssm/fft_conv.hpp"
#include "sssm/io.hpp"
#include "sssm/symmetric_eigen.hpp"

namespace sssm {
namespace {

// Hankel generator g[m] = Z[i,j] for 0-based m = i + j - 2.
double hankel_generator(long m, HankelVariant variant) {
  const double s = static_cast<double>(m + 2);
  if (variant == HankelVariant::Primary) return 2.0 / (s * s * s - s);
  if (m % 2 != 0) return 0.0;
  return 16.0 / ((s + 3.0) * (s - 1.0) * (s + 1.0));
}

constexpr Eigen::Index kDirectMatvecLimit = 64;

void fix_sign(Eigen::Ref<Vector> v) {
  const double cutoff = 1e-10 * v.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v(i)) > cutoff) {
      if (v(i) < 0) v = -v;
      return;
    }
  }
}

}  // namespace

std::string to_string(HankelVariant v) { return v == HankelVariant::Primary ? "primary" : "alternative"; }

HankelVariant parse_variant(const std::string& name) {
  if (name == "primary") return HankelVariant::Primary;
  if (name == "alternative") return HankelVariant::Alternative;
  throw DomainError("unknown Hankel variant '" + name + "' (expected primary|alternative)");
}

double hankel_entry(long i, long j, HankelVariant variant) {
  require(i >= 1 && j >= 1, "hankel_entry: indices are 1-based");
  return hankel_generator(i + j - 2, variant);
}

Matrix hankel_matrix(Eigen::Index L, HankelVariant variant) {
  require(L >= 1, "hankel_matrix: L must be positive");
  Matrix z(L, L);
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index j = 0; j < L; ++j) z(i, j) = hankel_generator(static_cast<long>(i + j), variant);
  return z;
}

Vector hankel_matvec(Eigen::Index L, HankelVariant variant, const Vector& v) {
  require(L >= 1, "hankel_matvec: L must be positive");
  require(v.size() == L, "hankel_matvec: vector length must equal L");
  Vector out(L);
  if (L <= kDirectMatvecLimit) {
    for (Eigen::Index i = 0; i < L; ++i) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j < L; ++j) acc += hankel_generator(static_cast<long>(i + j), variant) * v(j);
      out(i) = acc;
    }
    return out;
  }
  // (Z v)_i = sum_j g[i + j] v[j] = (g * reverse(v))[i + L - 1].
  const auto n = static_cast<std::size_t>(L);
  const RealFft fft(next_pow2(3 * n - 2));
  std::vector<double> g(2 * n - 1);
  for (std::size_t m = 0; m < g.size(); ++m) g[m] = hankel_generator(static_cast<long>(m), variant);
  std::vector<double> rev(n);
  for (std::size_t j = 0; j < n; ++j) rev[j] = v(static_cast<Eigen::Index>(n - 1 - j));
  const ComplexVector gs = fft.forward(g);
  ComplexVector vs = fft.forward(rev);
  for (std::size_t f = 0; f < vs.size(); ++f) vs[f] *= gs[f];
  const std::vector<double> conv = fft.inverse(vs);
  const double norm = 1.0 / static_cast<double>(fft.size());
  for (std::size_t i = 0; i < n; ++i) out(static_cast<Eigen::Index>(i)) = conv[i + n - 1] * norm;
  return out;
}

double FilterBank::max_residual() const {
  double worst = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    const Vector col = phi.col(k);
    worst = std::max(worst, (hankel_matvec(L, variant, col) - sigma(k) * col).norm());
  }
  return worst;
}

double FilterBank::max_off_orthogonality() const {
  const Matrix gram = phi.transpose() * phi;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < K; ++i)
    for (Eigen::Index j = 0; j < K; ++j)
      if (i != j) worst = std::max(worst, std::abs(gram(i, j)));
  return worst;
}

FilterBank compute_filterbank(Eigen::Index L, Eigen::Index K, HankelVariant variant, const FilterBankOptions& opts) {
  require(L >= 1, "compute_filterbank: L must be positive");
  require(K >= 1 && K <= L, "compute_filterbank: need 1 <= K <= L");

  bool dense = opts.method == EigenMethod::Dense || (opts.method == EigenMethod::Auto && L <= opts.dense_limit);
  SymmetricEigen eig;
  if (dense) {
    eig = symmetric_eigen(hankel_matrix(L, variant), true);
  } else {
    LanczosOptions lopts;
    lopts.tolerance = 1e-10;
    eig = lanczos_top_k([&](const Vector& v) { return hankel_matvec(L, variant, v); }, L, K, lopts);
  }

  FilterBank bank;
  bank.L = L;
  bank.K = K;
  bank.variant = variant;
  bank.sigma = eig.values.head(K).cwiseMax(0.0);
  bank.phi = eig.vectors.leftCols(K);
  for (Eigen::Index k = 0; k < K; ++k) fix_sign(bank.phi.col(k));
  bank.scaled_phi = bank.phi * bank.sigma.array().pow(0.25).matrix().asDiagonal();
  return bank;
}

Vector hankel_spectrum(Eigen::Index L, HankelVariant variant) {
  return symmetric_eigen(hankel_matrix(L, variant), false).values;
}

void validate_filterbank(const FilterBank& bank, double tol) {
  require(bank.K >= 1 && bank.K <= bank.L, "filter bank: need 1 <= K <= L");
  require(bank.sigma.size() == bank.K && bank.phi.rows() == bank.L && bank.phi.cols() == bank.K &&
              bank.scaled_phi.rows() == bank.L && bank.scaled_phi.cols() == bank.K,
          "filter bank: array shapes inconsistent with L, K");
  for (Eigen::Index k = 0; k < bank.K; ++k) {
    require(bank.sigma(k) >= 0.0, "filter bank: negative eigenvalue");
    if (k > 0) require(bank.sigma(k - 1) >= bank.sigma(k), "filter bank: eigenvalues not descending");
  }
  const double scale = std::max(1.0, bank.sigma(0));
  for (Eigen::Index k = 0; k < bank.K; ++k) {
    const Vector col = bank.phi.col(k);
    require(std::abs(col.norm() - 1.0) <= tol, "filter bank: filter " + std::to_string(k) + " is not unit norm");
    const double res = (hankel_matvec(bank.L, bank.variant, col) - bank.sigma(k) * col).norm();
    require(res <= tol * scale, "filter bank: eigen-residual " + std::to_string(res) + " too large for filter " +
                                    std::to_string(k));
  }
  require(bank.max_off_orthogonality() <= tol, "filter bank: filters are not orthogonal");
}

MuVector mu_vector(double alpha, Eigen::Index L, HankelVariant variant) {
  require(L >= 1, "mu_vector: L must be positive");
  if (variant == HankelVariant::Primary)
    require(alpha >= 0.0 && alpha <= 1.0, "mu_vector: Primary requires alpha in [0, 1]");
  else
    require(alpha >= -1.0 && alpha <= 1.0, "mu_vector: Alternative requires alpha in [-1, 1]");
  MuVector mu;
  mu.alpha = alpha;
  mu.variant = variant;
  mu.values.resize(L);
  const double lead = variant == HankelVariant::Primary ? alpha - 1.0 : alpha * alpha - 1.0;
  double power = 1.0;
  for (Eigen::Index i = 0; i < L; ++i) {
    mu.values(i) = lead * power;
    power *= alpha;
  }
  return mu;
}

double projection_residual(const FilterBank& bank, double alpha) {
  const Vector mu = mu_vector(alpha, bank.L, bank.variant).values;
  const Vector coeff = bank.phi.transpose() * mu;
  return (mu - bank.phi * coeff).squaredNorm();
}

double projection_residual_constant(HankelVariant variant) { return variant == HankelVariant::Primary ? 12.0 : 6.0; }

double spectrum_noise_floor(Eigen::Index L, double sigma_max) {
  return static_cast<double>(L) * std::numeric_limits<double>::epsilon() * std::abs(sigma_max);
}

double spectral_decay_bound(Eigen::Index j, Eigen::Index L) {
  constexpr double gamma = 235200.0;
  const double rate = std::numbers::pi * std::numbers::pi / 4.0;
  return gamma * std::exp(-rate * static_cast<double>(j) / std::log(static_cast<double>(L)));
}

void save_filterbank(const FilterBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(bank.K * bank.L));
  for (Eigen::Index k = 0; k < bank.K; ++k)
    for (Eigen::Index i = 0; i < bank.L; ++i) flat.push_back(bank.phi(i, k));
  const auto payload = io::encode_f64le(flat);
  nlohmann::json meta = {{"L", bank.L},
                         {"K", bank.K},
                         {"variant", to_string(bank.variant)},
                         {"sigma", std::vector<double>(bank.sigma.data(), bank.sigma.data() + bank.K)},
                         {"format_version", kFilterCacheFormatVersion},
                         {"checksum", io::crc32_hex(payload)}};
  io::write_bytes(dir / "filters.f64le", payload);
  io::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

FilterBank load_filterbank(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(dir / "meta.json"));
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(std::string("malformed meta.json: ") + e.what());
  }
  if (meta.value("format_version", -1) != kFilterCacheFormatVersion)
    throw io::FormatError("unsupported filter cache format version");
  const auto payload = io::read_bytes(dir / "filters.f64le");
  if (meta.value("checksum", std::string{}) != io::crc32_hex(payload))
    throw io::FormatError("filter cache checksum mismatch in " + dir.string());

  FilterBank bank;
  bank.L = meta.at("L").get<Eigen::Index>();
  bank.K = meta.at("K").get<Eigen::Index>();
  bank.variant = parse_variant(meta.at("variant").get<std::string>());
  const auto sigma = meta.at("sigma").get<std::vector<double>>();
  const auto flat = io::decode_f64le(payload);
  if (static_cast<Eigen::Index>(sigma.size()) != bank.K || static_cast<Eigen::Index>(flat.size()) != bank.K * bank.L)
    throw io::FormatError("filter cache arrays do not match L, K");
  bank.sigma = Eigen::Map<const Vector>(sigma.data(), bank.K);
  bank.phi.resize(bank.L, bank.K);
  for (Eigen::Index k = 0; k < bank.K; ++k)
    for (Eigen::Index i = 0; i < bank.L; ++i) bank.phi(i, k) = flat[static_cast<std::size_t>(k * bank.L + i)];
  bank.scaled_phi = bank.phi * bank.sigma.array().pow(0.25).matrix().asDiagonal();
  validate_filterbank(bank);
  return bank;
}

std::string filterbank_cache_name(Eigen::Index L, Eigen::Index K, HankelVariant variant) {
  return to_string(variant) + "_L" + std::to_string(L) + "_K" + std::to_string(K);
}

FilterBank cached_filterbank(Eigen::Index L, Eigen::Index K, HankelVariant variant,
                             std::optional<std::filesystem::path> root) {
  if (!root) {
    if (const char* env = std::getenv("SPECTRAL_STU_CACHE"); env && *env) root = env;
  }
  if (!root) return compute_filterbank(L, K, variant);
  const auto dir = *root / filterbank_cache_name(L, K, variant);
  if (std::filesystem::exists(dir / "meta.json")) return load_filterbank(dir);
  FilterBank bank = compute_filterbank(L, K, variant);
  save_filterbank(bank, dir);
  return bank;
}

}  // namespace sssm
