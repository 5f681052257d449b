#pragma once

#include <complex>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sssm/filterbank.hpp"
#include "sssm/lds.hpp"
#include "sssm/parallel.hpp"
#include "sssm/stu.hpp"

namespace sssm {

enum class OptimizerKind { SGD, Adam };
enum class LrSchedule { Constant, WarmupCosine };

struct TrainConfig {
  double learning_rate = 1e-2;
  std::size_t steps = 1000;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  LrSchedule schedule = LrSchedule::Constant;
  double warmup_frac = 0.1;
  double my_lr_scale = 1.0;  // multiplies the M^y learning rate
  std::size_t eval_every = 0;  // full-dataset loss every n steps (0 = off)

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

/// Learning rate at 0-based `step` under the configured schedule.
double scheduled_lr(const TrainConfig& cfg, std::size_t step);

/// SGD or Adam over a flat parameter vector; `lr_scale` is per coordinate.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, Eigen::Index n);
  void step(Vector& theta, const Vector& grad, const Vector& lr_scale, std::size_t step_index);

 private:
  TrainConfig cfg_;
  Vector m_, v_;
};

struct TrainReport {
  std::vector<double> loss_curve;  // minibatch loss before each update
  std::vector<std::pair<std::size_t, double>> eval_curve;  // (step, full-dataset loss)
  Vector final_params;
  double initial_loss = 0.0;  // full-dataset loss at initialization
  double final_loss = 0.0;    // full-dataset loss after the last step
  bool converged = true;
  std::string diagnostic;
  std::map<std::string, double> metrics;
  double wall_time = 0.0;
  std::uint64_t seed = 0;
  TrainConfig config;

  /// JSON echo; wall time goes under a separate "timing" key only when asked.
  std::string to_json(bool with_timing = false) const;
  std::string loss_csv() const;
};

/// Mean squared error averaged over time and channels, then over sequences.
double mse(const SequenceBatch& predictions, const SequenceBatch& targets);

/// Outputs of an LDS on i.i.d. N(0, 1) inputs.
SequenceDataset lds_dataset(const LdsParams& lds, std::size_t count, Eigen::Index length, std::uint64_t seed);

// ---------------------------------------------------------------- STU

/// Featurized dataset for repeated STU loss evaluations.
struct StuProblem {
  const FilterBank* bank = nullptr;
  Eigen::Index K = 0;
  const SequenceDataset* data = nullptr;
  std::vector<SpectralFeatures> features;  // scaled

  StuProblem(const FilterBank& bank, Eigen::Index K, const SequenceDataset& data);
};

/// MSE over the listed sequences (all when empty) and its gradient in
/// StuParams::pack() order.
std::pair<double, Vector> stu_loss_and_gradient(const StuParams& params, const StuProblem& problem,
                                                const std::vector<std::size_t>& indices = {});

/// Adam/SGD on MSE from zero-initialized params through the unrolled
/// recursion. k_y = 0 trains the vanilla STU. Throws NonFiniteLoss.
TrainReport fit_stu(const SequenceDataset& data, const FilterBank& bank, Eigen::Index K, Eigen::Index k_y,
                    const TrainConfig& cfg);

struct LeastSquaresFit {
  StuParams params;
  double residual = 0.0;  // training MSE
  bool ridge_used = false;
  Eigen::Index rank = 0;
};

/// Globally optimal vanilla STU under MSE. Solved by column-equilibrated
/// Householder QR on the design matrix; a rank-deficient design falls back
/// to ridge regression with lambda = 1e-8.
LeastSquaresFit fit_stu_least_squares(const SequenceDataset& data, const FilterBank& bank, Eigen::Index K);

// ---------------------------------------------------------------- LRU

enum class GammaMode { Off, Coupled };

/// Complex diagonal RNN. With stable_exp the eigenvalues are
/// lambda = exp(-exp(nu_log) + i exp(theta_log)); otherwise nu_log holds the
/// magnitude and theta_log the phase directly.
struct LruParams {
  Vector nu_log, theta_log;
  Matrix B_re, B_im;
  Matrix C_re, C_im;
  Matrix D;
  GammaMode gamma = GammaMode::Coupled;
  bool stable_exp = true;

  Eigen::Index d_hidden() const { return nu_log.size(); }
  Eigen::Index d_in() const { return B_re.cols(); }
  Eigen::Index d_out() const { return C_re.rows(); }
  Eigen::VectorXcd lambda() const;
  /// sqrt(1 - |lambda|^2) when coupled, ones otherwise.
  Vector gamma_vec() const;
  void validate() const;
  Eigen::Index parameter_count() const;
  /// Order: nu, theta, B_re, B_im, C_re, C_im, D.
  Vector pack() const;
  void unpack(const Vector& flat);
};

struct LruOptions {
  bool stable_exp = true;
  bool gamma_norm = true;
  bool ring_init = true;
  double min_rad = 0.9;
  double max_rad = 0.999;
  double max_init_phase = 0.6283185307179586;  // pi / 5

  /// All interventions disabled: direct magnitude/phase, no gamma, magnitudes
  /// uniform on [0.95, 1) and phases on [0, 2 pi).
  static LruOptions none();
};

LruParams lru_init(Eigen::Index d_hidden, Eigen::Index d_in, Eigen::Index d_out, const LruOptions& opts,
                   std::uint64_t seed);

/// x_t = lambda . x_{t-1} + gamma . (B u_t), y_t = Re(C x_t) + D u_t.
Matrix lru_forward_sequence(const LruParams& params, const Matrix& inputs);
SequenceBatch lru_forward(const LruParams& params, const SequenceBatch& inputs);

std::pair<double, Vector> lru_loss_and_gradient(const LruParams& params, const SequenceDataset& data,
                                                const std::vector<std::size_t>& indices = {});

/// Trains an LRU; non-finite losses or an eigenvalue leaving the unit disk
/// abort with NonFiniteLoss. `converged` reports a >= 10x loss reduction.
TrainReport fit_lru(const SequenceDataset& data, Eigen::Index d_hidden, const TrainConfig& cfg,
                    const LruOptions& opts);

// ---------------------------------------------------------------- K sweep

struct KSweepOptions {
  bool least_squares = true;  // otherwise fit_stu with `train`
  TrainConfig train;
  std::size_t train_sequences = 16;
  std::size_t test_sequences = 4;
  Eigen::Index length = 256;
  std::uint64_t seed = 0;
};

struct KSweepResult {
  Eigen::Index K = 0;
  double final_error = 0.0;  // held-out MSE
};

/// Fits an STU for each K on one dataset drawn from `lds`. Runs in parallel
/// across K values.
std::vector<KSweepResult> k_sweep(const LdsParams& lds, const std::vector<Eigen::Index>& K_values,
                                  const FilterBank& bank, const KSweepOptions& opts, const ThreadBudget& budget = {});

/// Columns K, final_error, ln_error.
std::string k_sweep_results_csv(const std::vector<KSweepResult>& rows);

}  // namespace sssm
