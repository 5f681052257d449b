#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sssm/types.hpp"

namespace sssm {

/// Version string of the FFT backend.
std::string fft_backend_version();

/// Smallest power of two >= n (n >= 1).
std::size_t next_pow2(std::size_t n);

/// FFT size for zero-padded linear convolution of two length-`len` signals:
/// the next power of two >= 2 len - 1.
std::size_t linear_conv_size(std::size_t len);

using ComplexVector = std::vector<std::complex<double>>;

/// Real-to-complex transforms of a fixed power-of-two size backed by FFTW.
/// Plans are created once per size under a lock and shared; execution is
/// thread-safe.
class RealFft {
 public:
  explicit RealFft(std::size_t n);

  std::size_t size() const noexcept { return n_; }
  std::size_t spectrum_size() const noexcept { return n_ / 2 + 1; }

  /// Zero-pads `in` to size() and returns its spectrum.
  ComplexVector forward(std::span<const double> in) const;
  /// Unnormalized inverse; result has size() samples.
  std::vector<double> inverse(const ComplexVector& spec) const;

  /// Allocation-free variants. `out` holds spectrum_size() bins; inverse_into
  /// overwrites `spec` and writes size() samples.
  void forward_into(std::span<const double> in, std::complex<double>* out) const;
  void inverse_into(std::complex<double>* spec, double* out) const;
  /// Unnormalized complex inverse over all size() bins.
  void inverse_complex_into(std::complex<double>* spec, std::complex<double>* out) const;

 private:
  std::size_t n_;
  const void* plans_;
};

/// Precomputed spectra of a set of kernels for causal convolution against
/// signals of length <= `max_len`.
///
/// convolve(): out[t] = sum_{i=0}^{t} kernel[i] * signal[t - i], t < len.
/// correlate(): out[s] = sum_{t>=s} signal[t] * kernel[t - s], the adjoint of
/// convolve() with the same kernel.
class CausalConvolver {
 public:
  /// `kernels` holds one kernel per column (rows = taps, truncated to max_len).
  CausalConvolver(const Matrix& kernels, std::size_t max_len);

  std::size_t kernel_count() const noexcept { return spectra_.size(); }
  std::size_t max_length() const noexcept { return max_len_; }

  ComplexVector transform(std::span<const double> signal) const;

  /// Convolve a pre-transformed signal with kernel k; writes `len` outputs.
  void convolve(const ComplexVector& signal_spectrum, std::size_t k, std::span<double> out) const;
  /// convolve() against kernels ka and kb with a single complex inverse FFT.
  void convolve_pair(const ComplexVector& signal_spectrum, std::size_t ka, std::size_t kb, std::span<double> out_a,
                     std::span<double> out_b) const;
  void correlate(std::span<const double> signal, std::size_t k, std::span<double> out) const;

  /// One term of a summed correlation: `signal` correlated with kernel `k`.
  struct CorrelationTerm {
    std::span<const double> signal;
    std::size_t k;
  };
  /// out = sum of correlate(term.signal, term.k) over all terms (equal
  /// lengths), accumulated in the frequency domain with one inverse FFT.
  void correlate_sum(std::span<const CorrelationTerm> terms, std::span<double> out) const;

 private:
  std::size_t max_len_;
  RealFft fft_;
  std::vector<ComplexVector> spectra_;
};

/// Direct O(len^2) causal convolution; test oracle and small-size path.
std::vector<double> causal_convolve_direct(std::span<const double> signal, std::span<const double> kernel);

}  // namespace sssm
