#include "sssm/fft_conv.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <map>
#include <memory>
#include <mutex>

namespace sssm {
namespace {

struct PlanPair {
  fftw_plan r2c = nullptr;
  fftw_plan c2r = nullptr;
  fftw_plan c2c_inv = nullptr;
};

// FFTW's planner is not reentrant; plans are created once and kept for the
// lifetime of the process. fftw_execute_dft_* on fresh arrays is thread-safe.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

const PlanPair* plans_for(std::size_t n) {
  static std::map<std::size_t, std::unique_ptr<PlanPair>> cache;
  std::lock_guard lock(planner_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second.get();
  auto pair = std::make_unique<PlanPair>();
  double* real = fftw_alloc_real(n);
  fftw_complex* cplx = fftw_alloc_complex(n / 2 + 1);
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  pair->r2c = fftw_plan_dft_r2c_1d(static_cast<int>(n), real, cplx, flags);
  pair->c2r = fftw_plan_dft_c2r_1d(static_cast<int>(n), cplx, real, flags);
  fftw_complex* full_in = fftw_alloc_complex(n);
  fftw_complex* full_out = fftw_alloc_complex(n);
  pair->c2c_inv = fftw_plan_dft_1d(static_cast<int>(n), full_in, full_out, FFTW_BACKWARD, flags);
  fftw_free(real);
  fftw_free(cplx);
  fftw_free(full_in);
  fftw_free(full_out);
  const PlanPair* raw = pair.get();
  cache.emplace(n, std::move(pair));
  return raw;
}

}  // namespace

std::string fft_backend_version() { return fftw_version; }

std::size_t next_pow2(std::size_t n) { return std::bit_ceil(std::max<std::size_t>(n, 1)); }

std::size_t linear_conv_size(std::size_t len) { return next_pow2(2 * std::max<std::size_t>(len, 1) - 1); }

RealFft::RealFft(std::size_t n) : n_(n), plans_(nullptr) {
  require(n >= 1 && std::has_single_bit(n), "RealFft: size must be a power of two");
  plans_ = plans_for(n);
}

ComplexVector RealFft::forward(std::span<const double> in) const {
  ComplexVector out(spectrum_size());
  forward_into(in, out.data());
  return out;
}

std::vector<double> RealFft::inverse(const ComplexVector& spec) const {
  require(spec.size() == spectrum_size(), "RealFft::inverse: spectrum size mismatch");
  // c2r destroys its input.
  ComplexVector work = spec;
  std::vector<double> out(n_);
  const auto* p = static_cast<const PlanPair*>(plans_);
  fftw_execute_dft_c2r(p->c2r, reinterpret_cast<fftw_complex*>(work.data()), out.data());
  return out;
}

void RealFft::forward_into(std::span<const double> in, std::complex<double>* out) const {
  require(in.size() <= n_, "RealFft::forward: input longer than transform");
  thread_local std::vector<double> buf;
  buf.assign(n_, 0.0);
  std::copy(in.begin(), in.end(), buf.begin());
  const auto* p = static_cast<const PlanPair*>(plans_);
  fftw_execute_dft_r2c(p->r2c, buf.data(), reinterpret_cast<fftw_complex*>(out));
}

void RealFft::inverse_into(std::complex<double>* spec, double* out) const {
  const auto* p = static_cast<const PlanPair*>(plans_);
  fftw_execute_dft_c2r(p->c2r, reinterpret_cast<fftw_complex*>(spec), out);
}

void RealFft::inverse_complex_into(std::complex<double>* spec, std::complex<double>* out) const {
  const auto* p = static_cast<const PlanPair*>(plans_);
  fftw_execute_dft(p->c2c_inv, reinterpret_cast<fftw_complex*>(spec), reinterpret_cast<fftw_complex*>(out));
}

CausalConvolver::CausalConvolver(const Matrix& kernels, std::size_t max_len)
    : max_len_(max_len), fft_(linear_conv_size(max_len)) {
  require(max_len >= 1, "CausalConvolver: max_len must be positive");
  const std::size_t taps = std::min<std::size_t>(static_cast<std::size_t>(kernels.rows()), max_len);
  spectra_.reserve(static_cast<std::size_t>(kernels.cols()));
  for (Eigen::Index k = 0; k < kernels.cols(); ++k) {
    const Vector col = kernels.col(k).head(static_cast<Eigen::Index>(taps));
    spectra_.push_back(fft_.forward(std::span<const double>(col.data(), taps)));
  }
}

ComplexVector CausalConvolver::transform(std::span<const double> signal) const {
  require(signal.size() <= max_len_, "CausalConvolver: signal longer than max length");
  return fft_.forward(signal);
}

void CausalConvolver::convolve(const ComplexVector& signal_spectrum, std::size_t k, std::span<double> out) const {
  require(out.size() <= max_len_, "CausalConvolver: output longer than max length");
  const ComplexVector& h = spectra_.at(k);
  require(signal_spectrum.size() == h.size(), "CausalConvolver: spectrum size mismatch");
  thread_local ComplexVector prod;
  thread_local std::vector<double> full;
  prod.resize(h.size());
  full.resize(fft_.size());
  for (std::size_t f = 0; f < h.size(); ++f) prod[f] = signal_spectrum[f] * h[f];
  fft_.inverse_into(prod.data(), full.data());
  const double norm = 1.0 / static_cast<double>(fft_.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = full[t] * norm;
}

void CausalConvolver::convolve_pair(const ComplexVector& signal_spectrum, std::size_t ka, std::size_t kb,
                                    std::span<double> out_a, std::span<double> out_b) const {
  require(out_a.size() <= max_len_ && out_b.size() <= max_len_, "CausalConvolver: output longer than max length");
  const ComplexVector& ha = spectra_.at(ka);
  const ComplexVector& hb = spectra_.at(kb);
  require(signal_spectrum.size() == ha.size(), "CausalConvolver: spectrum size mismatch");
  // Both outputs are real, so one complex inverse of A + iB yields a + ib.
  const std::size_t n = fft_.size();
  const std::size_t half = ha.size();
  thread_local ComplexVector packed, full;
  packed.resize(n);
  full.resize(n);
  const std::complex<double> i(0.0, 1.0);
  for (std::size_t f = 0; f < half; ++f) {
    const std::complex<double> a = signal_spectrum[f] * ha[f];
    const std::complex<double> b = signal_spectrum[f] * hb[f];
    packed[f] = a + i * b;
    if (f > 0 && f < n - f) packed[n - f] = std::conj(a) + i * std::conj(b);
  }
  fft_.inverse_complex_into(packed.data(), full.data());
  const double norm = 1.0 / static_cast<double>(n);
  for (std::size_t t = 0; t < out_a.size(); ++t) out_a[t] = full[t].real() * norm;
  for (std::size_t t = 0; t < out_b.size(); ++t) out_b[t] = full[t].imag() * norm;
}

void CausalConvolver::correlate(std::span<const double> signal, std::size_t k, std::span<double> out) const {
  const CorrelationTerm term{signal, k};
  correlate_sum(std::span<const CorrelationTerm>(&term, 1), out);
}

void CausalConvolver::correlate_sum(std::span<const CorrelationTerm> terms, std::span<double> out) const {
  // out[s] = sum_t signal[t] h[t - s]; reversing the signal turns this into a
  // causal convolution whose output is read backwards.
  const std::size_t len = out.size();
  require(len <= max_len_, "CausalConvolver::correlate: length exceeds max length");
  const std::size_t bins = fft_.spectrum_size();
  thread_local ComplexVector acc, spec;
  thread_local std::vector<double> rev, full;
  acc.assign(bins, {0.0, 0.0});
  spec.resize(bins);
  rev.resize(len);
  full.resize(fft_.size());
  for (const auto& term : terms) {
    require(term.signal.size() == len, "CausalConvolver::correlate: length mismatch");
    std::reverse_copy(term.signal.begin(), term.signal.end(), rev.begin());
    fft_.forward_into(rev, spec.data());
    const ComplexVector& h = spectra_.at(term.k);
    for (std::size_t f = 0; f < bins; ++f) acc[f] += spec[f] * h[f];
  }
  fft_.inverse_into(acc.data(), full.data());
  const double norm = 1.0 / static_cast<double>(fft_.size());
  for (std::size_t s = 0; s < len; ++s) out[s] = full[len - 1 - s] * norm;
}

std::vector<double> causal_convolve_direct(std::span<const double> signal, std::span<const double> kernel) {
  std::vector<double> out(signal.size(), 0.0);
  for (std::size_t t = 0; t < signal.size(); ++t) {
    const std::size_t upto = std::min(t + 1, kernel.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < upto; ++i) acc += kernel[i] * signal[t - i];
    out[t] = acc;
  }
  return out;
}

}  // namespace sssm
