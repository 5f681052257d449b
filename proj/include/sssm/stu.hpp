#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <vector>

#include "sssm/fft_conv.hpp"
#include "sssm/filterbank.hpp"
#include "sssm/types.hpp"

namespace sssm {

/// Learnable matrices of one spectral transform unit.
///
///   y_t = sum_i M^y_i y_{t-i} + sum_{i=1..3} M^u_i u_{t+1-i}
///         + sum_k M^{phi+}_k sigma_k^{1/4} U+_{t-2,k} + sum_k M^{phi-}_k sigma_k^{1/4} U-_{t-2,k}
///
/// With `M_y` empty the autoregressive term is the fixed y_{t-2}. For the
/// Alternative variant `M_phi_plus` holds the single M^phi set and
/// `M_phi_minus` is empty.
struct StuParams {
  HankelVariant variant = HankelVariant::Primary;
  Eigen::Index K = 0;
  Eigen::Index d_in = 0;
  Eigen::Index d_out = 0;
  std::array<Matrix, 3> M_u;
  std::vector<Matrix> M_phi_plus;
  std::vector<Matrix> M_phi_minus;
  std::vector<Matrix> M_y;

  static StuParams zeros(HankelVariant variant, Eigen::Index K, Eigen::Index d_in, Eigen::Index d_out,
                         Eigen::Index k_y = 0);

  Eigen::Index k_y() const { return static_cast<Eigen::Index>(M_y.size()); }
  bool autoregressive() const { return !M_y.empty(); }
  bool has_minus() const { return variant == HankelVariant::Primary; }

  /// Throws DomainError if any matrix shape disagrees with K, d_in, d_out, variant.
  void validate() const;

  /// Number of scalars across all matrices.
  Eigen::Index parameter_count() const;
  /// All matrices flattened in a fixed order: M_u, M_phi_plus, M_phi_minus, M_y
  /// (each column-major).
  Vector pack() const;
  /// Inverse of pack() into a params object of the same shape.
  void unpack(const Vector& flat);

  /// [M^{phi+}_1 ... M^{phi+}_K] as one d_out x (K d_in) block (likewise minus).
  Matrix stacked_plus() const;
  Matrix stacked_minus() const;
};

/// Spectral features for one sequence. Column k * d_in + c of `plus` holds
/// U+_{t,k} for input channel c (rows = time); `minus` likewise, and is
/// empty when not requested.
struct SpectralFeatures {
  Eigen::Index K = 0;
  Eigen::Index d_in = 0;
  Matrix plus;
  Matrix minus;

  /// Feature vector U+_{t,k} for 0-based row t.
  Vector plus_at(Eigen::Index t, Eigen::Index k) const { return plus.row(t).segment(k * d_in, d_in).transpose(); }
  Vector minus_at(Eigen::Index t, Eigen::Index k) const { return minus.row(t).segment(k * d_in, d_in).transpose(); }
};

enum class FeatureScaling { Raw, Scaled };

/// FFT featurization against the first K filters of a bank, reusable across
/// sequences no longer than `max_len`. Scaled mode convolves with
/// sigma_k^{1/4} phi_k. The minus features use (-1)^i phi_k(i).
class SpectralFeaturizer {
 public:
  SpectralFeaturizer(const FilterBank& bank, Eigen::Index K, Eigen::Index max_len, FeatureScaling scaling,
                     bool with_minus);

  Eigen::Index K() const { return K_; }
  Eigen::Index max_length() const { return max_len_; }
  bool with_minus() const { return with_minus_; }

  SpectralFeatures operator()(const Matrix& inputs) const;

  /// Adjoint map: given dLoss/dplus and dLoss/dminus (shapes as in
  /// SpectralFeatures), returns dLoss/dinputs. `grad_minus` may be empty.
  Matrix adjoint(const Matrix& grad_plus, const Matrix& grad_minus) const;

 private:
  Eigen::Index K_;
  Eigen::Index max_len_;
  bool with_minus_;
  std::shared_ptr<const CausalConvolver> conv_;
};

/// U+ and U- for every sequence in the batch via FFT convolution.
/// Throws DomainError if a sequence is longer than bank.L.
std::vector<SpectralFeatures> featurize(const FilterBank& bank, const SequenceBatch& inputs,
                                        FeatureScaling scaling = FeatureScaling::Raw);

/// Same semantics as featurize() via the direct O(L^2) sums.
std::vector<SpectralFeatures> naive_featurize(const FilterBank& bank, const SequenceBatch& inputs,
                                              FeatureScaling scaling = FeatureScaling::Raw);

/// Input-driven part of the output: M^u terms plus the spectral terms at
/// feature index t-2 (zero for t <= 2). `features` must be scaled.
Matrix stu_drive(const StuParams& params, const Matrix& inputs, const SpectralFeatures& features);

/// Runs the output recursion over a drive sequence: vanilla
/// (y_t = y_{t-2} + z_t) when M_y is empty, else y_t = sum_i M^y_i y_{t-i} + z_t.
Matrix stu_recursion(const StuParams& params, const Matrix& drive);

/// Single-sequence forward for any variant; features are computed internally.
Matrix stu_forward_sequence(const StuParams& params, const FilterBank& bank, const Matrix& inputs);

/// Vanilla STU (Primary filters, fixed y_{t-2} coupling).
SequenceBatch stu_forward(const StuParams& params, const FilterBank& bank, const SequenceBatch& inputs);
/// AR-STU with learned M^y_1..M^y_{k_y}.
SequenceBatch ar_stu_forward(const StuParams& params, const FilterBank& bank, const SequenceBatch& inputs);
/// STU over Alternative filters with a single M^phi set.
SequenceBatch alt_stu_forward(const StuParams& params, const FilterBank& bank, const SequenceBatch& inputs);

/// Gradients of a scalar loss through one forward pass.
struct StuGradients {
  StuParams params;  // same shape as the forward params
  Matrix inputs;     // dLoss/du, filled only when requested
};

/// Reverse-mode pass for one sequence given dLoss/dy. `output` is the
/// forward result (needed for M^y gradients); `featurizer` supplies the
/// convolution adjoint when `want_input_grad` is set.
StuGradients stu_backward(const StuParams& params, const Matrix& inputs, const SpectralFeatures& features,
                          const Matrix& output, const Matrix& grad_output, const SpectralFeaturizer* featurizer,
                          bool want_input_grad);

void save_stu_params(const StuParams& params, const std::filesystem::path& dir);
StuParams load_stu_params(const std::filesystem::path& dir);

}  // namespace sssm
