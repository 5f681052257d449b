#include "sssm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "sssm/io.hpp"
#include "sssm/rng.hpp"

namespace sssm {

using nlohmann::json;

void TrainConfig::validate() const {
  require(learning_rate > 0.0, "TrainConfig: learning_rate must be positive");
  require(steps >= 1 && batch_size >= 1, "TrainConfig: steps and batch_size must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0,
          "TrainConfig: Adam betas must lie in [0, 1) and epsilon must be positive");
  require(weight_decay >= 0.0, "TrainConfig: weight_decay must be non-negative");
  require(warmup_frac >= 0.0 && warmup_frac < 1.0, "TrainConfig: warmup_frac must lie in [0, 1)");
  require(my_lr_scale > 0.0, "TrainConfig: my_lr_scale must be positive");
}

std::string TrainConfig::to_json() const {
  json j = {{"learning_rate", learning_rate},
            {"steps", steps},
            {"batch_size", batch_size},
            {"seed", seed},
            {"optimizer", optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"weight_decay", weight_decay},
            {"schedule", schedule == LrSchedule::Constant ? "constant" : "warmup_cosine"},
            {"warmup_frac", warmup_frac},
            {"my_lr_scale", my_lr_scale},
            {"eval_every", eval_every}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("malformed training config: ") + e.what());
  }
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  const std::string opt = j.value("optimizer", std::string{"adam"});
  if (opt == "adam") {
    c.optimizer = OptimizerKind::Adam;
  } else if (opt == "sgd") {
    c.optimizer = OptimizerKind::SGD;
  } else {
    throw io::FormatError("optimizer must be 'sgd' or 'adam'");
  }
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  const std::string sched = j.value("schedule", std::string{"constant"});
  if (sched == "constant") {
    c.schedule = LrSchedule::Constant;
  } else if (sched == "warmup_cosine") {
    c.schedule = LrSchedule::WarmupCosine;
  } else {
    throw io::FormatError("schedule must be 'constant' or 'warmup_cosine'");
  }
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  c.my_lr_scale = j.value("my_lr_scale", c.my_lr_scale);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.validate();
  return c;
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
  if (cfg.schedule == LrSchedule::Constant) return cfg.learning_rate;
  const auto warm = static_cast<std::size_t>(cfg.warmup_frac * static_cast<double>(cfg.steps));
  if (step < warm) return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg.steps - warm));
  const double progress = static_cast<double>(step - warm) / span;
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Optimizer::Optimizer(const TrainConfig& cfg, Eigen::Index n) : cfg_(cfg), m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

void Optimizer::step(Vector& theta, const Vector& grad, const Vector& lr_scale, std::size_t step_index) {
  const double lr = scheduled_lr(cfg_, step_index);
  Vector g = grad;
  if (cfg_.weight_decay > 0.0) g += cfg_.weight_decay * theta;
  if (cfg_.optimizer == OptimizerKind::SGD) {
    theta -= lr * lr_scale.cwiseProduct(g);
    return;
  }
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * g;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * g.cwiseAbs2();
  const double t = static_cast<double>(step_index + 1);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  const Vector denom = (v_ / c2).cwiseSqrt().array() + cfg_.epsilon;
  theta -= lr * lr_scale.cwiseProduct((m_ / c1).cwiseQuotient(denom));
}

std::string TrainReport::to_json(bool with_timing) const {
  json j;
  j["seed"] = seed;
  j["config"] = json::parse(config.to_json());
  j["loss_curve"] = loss_curve;
  json ev = json::array();
  for (const auto& [s, l] : eval_curve) ev.push_back({{"step", s}, {"loss", l}});
  j["eval_curve"] = ev;
  j["initial_loss"] = initial_loss;
  j["final_loss"] = final_loss;
  j["converged"] = converged;
  j["diagnostic"] = diagnostic;
  j["metrics"] = metrics;
  j["final_params"] = std::vector<double>(final_params.data(), final_params.data() + final_params.size());
  if (with_timing) j["timing"] = {{"wall_time_s", wall_time}};
  return j.dump(2);
}

std::string TrainReport::loss_csv() const {
  std::ostringstream os;
  os << "step,loss\n";
  for (std::size_t i = 0; i < loss_curve.size(); ++i) os << i << ',' << io::format_real(loss_curve[i]) << '\n';
  return os.str();
}

double mse(const SequenceBatch& predictions, const SequenceBatch& targets) {
  require(predictions.size() == targets.size() && !targets.empty(), "mse: batch sizes differ or are empty");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    require(predictions[i].rows() == targets[i].rows() && predictions[i].cols() == targets[i].cols(),
            "mse: sequence shapes differ");
    total += (predictions[i] - targets[i]).squaredNorm() / static_cast<double>(targets[i].size());
  }
  return total / static_cast<double>(targets.size());
}

SequenceDataset lds_dataset(const LdsParams& lds, std::size_t count, Eigen::Index length, std::uint64_t seed) {
  SequenceDataset d;
  d.inputs = gaussian_inputs(count, length, lds.input_dim(), seed);
  d.targets = simulate_lds(lds, d.inputs);
  return d;
}

namespace {

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

void check_dataset(const SequenceDataset& data) {
  require(!data.inputs.empty(), "training: dataset is empty");
  require(data.inputs.size() == data.targets.size(), "training: inputs and targets differ in count");
  for (std::size_t i = 0; i < data.size(); ++i)
    require(data.inputs[i].rows() == data.targets[i].rows(), "training: input and target lengths differ");
}

using LossGrad = std::function<std::pair<double, Vector>(const Vector&, const std::vector<std::size_t>&)>;

struct LoopResult {
  bool diverged = false;
  std::string diagnostic;
};

/// Shared minibatch loop. `throw_on_divergence` selects between raising
/// NonFiniteLoss and returning a diagnostic.
LoopResult run_loop(Vector& theta, const LossGrad& loss_grad, const Vector& lr_scale, std::size_t n_items,
                    const TrainConfig& cfg, TrainReport& report, const char* who, bool throw_on_divergence,
                    const std::function<void(const Vector&)>& check_params = {}) {
  Rng rng(cfg.seed);
  Optimizer opt(cfg, theta.size());
  const auto everything = all_indices(n_items);
  report.loss_curve.reserve(cfg.steps);
  std::vector<std::size_t> batch(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& b : batch) b = static_cast<std::size_t>(rng.below(n_items));
    auto [loss, grad] = loss_grad(theta, batch);
    if (!std::isfinite(loss) || !grad.allFinite()) {
      const std::string msg = std::string(who) + ": non-finite loss";
      if (throw_on_divergence) throw NonFiniteLoss(msg, static_cast<long>(step));
      return {true, msg + " at step " + std::to_string(step)};
    }
    report.loss_curve.push_back(loss);
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0)
      report.eval_curve.emplace_back(step, loss_grad(theta, everything).first);
    opt.step(theta, grad, lr_scale, step);
    if (check_params) {
      try {
        check_params(theta);
      } catch (const DomainError& e) {
        const std::string msg = std::string(who) + ": " + e.what();
        if (throw_on_divergence) throw NonFiniteLoss(msg, static_cast<long>(step));
        return {true, msg + " at step " + std::to_string(step)};
      }
    }
  }
  return {};
}

}  // namespace

// ---------------------------------------------------------------- STU

StuProblem::StuProblem(const FilterBank& b, Eigen::Index k, const SequenceDataset& d) : bank(&b), K(k), data(&d) {
  check_dataset(d);
  const SpectralFeaturizer featurizer(b, k, d.inputs.max_length(), FeatureScaling::Scaled,
                                      b.variant == HankelVariant::Primary);
  features.reserve(d.size());
  for (const auto& u : d.inputs.items) features.push_back(featurizer(u));
}

std::pair<double, Vector> stu_loss_and_gradient(const StuParams& params, const StuProblem& problem,
                                                const std::vector<std::size_t>& indices) {
  const auto idx = indices.empty() ? all_indices(problem.data->size()) : indices;
  const double n = static_cast<double>(idx.size());
  double loss = 0.0;
  Vector grad = Vector::Zero(params.parameter_count());
  for (const std::size_t i : idx) {
    const Matrix& u = problem.data->inputs[i];
    const Matrix& target = problem.data->targets[i];
    const SpectralFeatures& f = problem.features[i];
    const Matrix y = stu_recursion(params, stu_drive(params, u, f));
    const Matrix diff = y - target;
    const double scale = static_cast<double>(diff.size());
    loss += diff.squaredNorm() / scale / n;
    const Matrix dy = (2.0 / (scale * n)) * diff;
    grad += stu_backward(params, u, f, y, dy, nullptr, false).params.pack();
  }
  return {loss, grad};
}

TrainReport fit_stu(const SequenceDataset& data, const FilterBank& bank, Eigen::Index K, Eigen::Index k_y,
                    const TrainConfig& cfg) {
  cfg.validate();
  check_dataset(data);
  const auto start = std::chrono::steady_clock::now();
  const StuProblem problem(bank, K, data);
  StuParams params =
      StuParams::zeros(bank.variant, K, data.inputs.channels(), data.targets.channels(), k_y);
  Vector theta = params.pack();
  Vector lr_scale = Vector::Ones(theta.size());
  const Eigen::Index my_count = k_y * params.d_out * params.d_out;
  if (my_count > 0) lr_scale.tail(my_count).setConstant(cfg.my_lr_scale);

  StuParams work = params;
  const LossGrad loss_grad = [&](const Vector& th, const std::vector<std::size_t>& idx) {
    work.unpack(th);
    return stu_loss_and_gradient(work, problem, idx);
  };

  TrainReport report;
  report.config = cfg;
  report.seed = cfg.seed;
  report.initial_loss = loss_grad(theta, {}).first;
  run_loop(theta, loss_grad, lr_scale, data.size(), cfg, report, "fit_stu", true);
  report.final_loss = loss_grad(theta, {}).first;
  if (!std::isfinite(report.final_loss)) throw NonFiniteLoss("fit_stu: non-finite final loss", static_cast<long>(cfg.steps));
  report.final_params = theta;
  report.metrics["K"] = static_cast<double>(K);
  report.metrics["k_y"] = static_cast<double>(k_y);
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

LeastSquaresFit fit_stu_least_squares(const SequenceDataset& data, const FilterBank& bank, Eigen::Index K) {
  check_dataset(data);
  const StuProblem problem(bank, K, data);
  const Eigen::Index d_in = data.inputs.channels();
  const Eigen::Index d_out = data.targets.channels();
  const bool minus = bank.variant == HankelVariant::Primary;
  const Eigen::Index width = K * d_in;
  const Eigen::Index p = 3 * d_in + (minus ? 2 : 1) * width;
  require(p <= 10000, "fit_stu_least_squares: feature dimension exceeds 1e4");

  Eigen::Index rows = 0;
  for (const auto& u : data.inputs.items) rows += u.rows();
  Matrix X = Matrix::Zero(rows, p);
  Matrix Y(rows, d_out);
  Eigen::Index at = 0;
  for (std::size_t s = 0; s < data.size(); ++s) {
    const Matrix& u = data.inputs[s];
    const SpectralFeatures& f = problem.features[s];
    const Eigen::Index T = u.rows();
    // psi_r = [u_r, u_{r-1}, u_{r-2}, F+_{r-2}, F-_{r-2}]; y_r sums psi over r, r-2, ...
    Matrix psi = Matrix::Zero(T, p);
    psi.middleCols(0, d_in) = u;
    if (T > 1) psi.block(1, d_in, T - 1, d_in) = u.topRows(T - 1);
    if (T > 2) {
      psi.block(2, 2 * d_in, T - 2, d_in) = u.topRows(T - 2);
      psi.block(2, 3 * d_in, T - 2, width) = f.plus.topRows(T - 2);
      if (minus) psi.block(2, 3 * d_in + width, T - 2, width) = f.minus.topRows(T - 2);
    }
    for (Eigen::Index r = 2; r < T; ++r) psi.row(r) += psi.row(r - 2);
    X.middleRows(at, T) = psi;
    Y.middleRows(at, T) = data.targets[s];
    at += T;
  }

  Vector scale(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double nrm = X.col(j).norm();
    scale(j) = nrm > 0.0 ? 1.0 / nrm : 1.0;
  }
  const Matrix Xs = X * scale.asDiagonal();
  LeastSquaresFit fit;
  Eigen::ColPivHouseholderQR<Matrix> qr(Xs);
  fit.rank = qr.rank();
  Matrix Ws;
  if (fit.rank == p) {
    Ws = qr.solve(Y);
  } else {
    fit.ridge_used = true;
    constexpr double ridge = 1e-8;
    Matrix Xa(rows + p, p);
    Xa << Xs, std::sqrt(ridge) * Matrix::Identity(p, p);
    Matrix Ya = Matrix::Zero(rows + p, d_out);
    Ya.topRows(rows) = Y;
    Ws = Eigen::HouseholderQR<Matrix>(Xa).solve(Ya);
  }
  const Matrix W = (scale.asDiagonal() * Ws).transpose();  // d_out x p

  StuParams params = StuParams::zeros(bank.variant, K, d_in, d_out);
  for (int i = 0; i < 3; ++i) params.M_u[static_cast<std::size_t>(i)] = W.middleCols(i * d_in, d_in);
  for (Eigen::Index k = 0; k < K; ++k) {
    params.M_phi_plus[static_cast<std::size_t>(k)] = W.middleCols(3 * d_in + k * d_in, d_in);
    if (minus) params.M_phi_minus[static_cast<std::size_t>(k)] = W.middleCols(3 * d_in + width + k * d_in, d_in);
  }
  fit.residual = stu_loss_and_gradient(params, problem).first;
  fit.params = std::move(params);
  return fit;
}

// ---------------------------------------------------------------- LRU

Eigen::VectorXcd LruParams::lambda() const {
  Eigen::VectorXcd lam(d_hidden());
  for (Eigen::Index j = 0; j < d_hidden(); ++j) {
    if (stable_exp) {
      lam(j) = std::exp(std::complex<double>(-std::exp(nu_log(j)), std::exp(theta_log(j))));
    } else {
      lam(j) = std::polar(nu_log(j), theta_log(j));
    }
  }
  return lam;
}

Vector LruParams::gamma_vec() const {
  if (gamma == GammaMode::Off) return Vector::Ones(d_hidden());
  const Eigen::VectorXcd lam = lambda();
  Vector g(d_hidden());
  for (Eigen::Index j = 0; j < d_hidden(); ++j) g(j) = std::sqrt(1.0 - std::norm(lam(j)));
  return g;
}

void LruParams::validate() const {
  const Eigen::Index h = d_hidden();
  require(h >= 1 && theta_log.size() == h, "LruParams: nu_log and theta_log must have length d_hidden");
  require(B_re.rows() == h && B_im.rows() == h && B_im.cols() == B_re.cols(), "LruParams: B must be d_hidden x d_in");
  require(C_re.cols() == h && C_im.cols() == h && C_im.rows() == C_re.rows(), "LruParams: C must be d_out x d_hidden");
  require(D.rows() == C_re.rows() && D.cols() == B_re.cols(), "LruParams: D must be d_out x d_in");
  const Eigen::VectorXcd lam = lambda();
  for (Eigen::Index j = 0; j < h; ++j)
    require(std::isfinite(std::abs(lam(j))) && std::abs(lam(j)) < 1.0, "LRU eigenvalue magnitude must be below 1");
}

Eigen::Index LruParams::parameter_count() const {
  return 2 * d_hidden() + 2 * B_re.size() + 2 * C_re.size() + D.size();
}

namespace {

template <typename P, typename F>
void for_each_lru_block(P& p, F&& f) {
  f(p.nu_log);
  f(p.theta_log);
  f(p.B_re);
  f(p.B_im);
  f(p.C_re);
  f(p.C_im);
  f(p.D);
}

}  // namespace

Vector LruParams::pack() const {
  Vector out(parameter_count());
  Eigen::Index at = 0;
  for_each_lru_block(*this, [&](const auto& m) {
    out.segment(at, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    at += m.size();
  });
  return out;
}

void LruParams::unpack(const Vector& flat) {
  require(flat.size() == parameter_count(), "LruParams::unpack: size mismatch");
  Eigen::Index at = 0;
  for_each_lru_block(*this, [&](auto& m) {
    Eigen::Map<Vector>(m.data(), m.size()) = flat.segment(at, m.size());
    at += m.size();
  });
}

LruOptions LruOptions::none() {
  LruOptions o;
  o.stable_exp = false;
  o.gamma_norm = false;
  o.ring_init = false;
  return o;
}

LruParams lru_init(Eigen::Index d_hidden, Eigen::Index d_in, Eigen::Index d_out, const LruOptions& opts,
                   std::uint64_t seed) {
  require(d_hidden >= 1 && d_in >= 1 && d_out >= 1, "lru_init: dimensions must be positive");
  require(opts.min_rad >= 0.0 && opts.min_rad < opts.max_rad && opts.max_rad < 1.0,
          "lru_init: need 0 <= min_rad < max_rad < 1");
  Rng rng(seed);
  LruParams p;
  p.stable_exp = opts.stable_exp;
  p.gamma = opts.gamma_norm ? GammaMode::Coupled : GammaMode::Off;
  p.nu_log.resize(d_hidden);
  p.theta_log.resize(d_hidden);
  for (Eigen::Index j = 0; j < d_hidden; ++j) {
    double r, phase;
    if (opts.ring_init) {
      const double lo = opts.min_rad * opts.min_rad, hi = opts.max_rad * opts.max_rad;
      r = std::sqrt(lo + rng.uniform() * (hi - lo));
      phase = std::max(opts.max_init_phase * rng.uniform(), 1e-8);
    } else {
      r = rng.uniform(0.95, 1.0);
      phase = std::max(2.0 * std::numbers::pi * rng.uniform(), 1e-8);
    }
    if (opts.stable_exp) {
      p.nu_log(j) = std::log(-std::log(r));
      p.theta_log(j) = std::log(phase);
    } else {
      p.nu_log(j) = r;
      p.theta_log(j) = phase;
    }
  }
  const double b_std = 1.0 / std::sqrt(2.0 * static_cast<double>(d_in));
  const double c_std = 1.0 / std::sqrt(static_cast<double>(d_hidden));
  p.B_re = b_std * rng.normal_matrix(d_hidden, d_in);
  p.B_im = b_std * rng.normal_matrix(d_hidden, d_in);
  p.C_re = c_std * rng.normal_matrix(d_out, d_hidden);
  p.C_im = c_std * rng.normal_matrix(d_out, d_hidden);
  p.D = rng.normal_matrix(d_out, d_in) / std::sqrt(static_cast<double>(d_in));
  return p;
}

namespace {

/// Hidden trajectory, one column per time step.
Eigen::MatrixXcd lru_states(const LruParams& p, const Matrix& u, const Eigen::VectorXcd& lam, const Vector& g) {
  require(u.cols() == p.d_in(), "lru_forward: input channels do not match B");
  const Eigen::MatrixXcd bc = p.B_re.cast<std::complex<double>>() + std::complex<double>(0, 1) * p.B_im;
  const Eigen::MatrixXcd v = g.asDiagonal() * (bc * u.transpose());
  Eigen::MatrixXcd x(p.d_hidden(), u.rows());
  Eigen::VectorXcd state = Eigen::VectorXcd::Zero(p.d_hidden());
  for (Eigen::Index t = 0; t < u.rows(); ++t) {
    state = lam.cwiseProduct(state) + v.col(t);
    x.col(t) = state;
  }
  return x;
}

Matrix lru_readout(const LruParams& p, const Matrix& u, const Eigen::MatrixXcd& x) {
  return (p.C_re * x.real() - p.C_im * x.imag()).transpose() + u * p.D.transpose();
}

}  // namespace

Matrix lru_forward_sequence(const LruParams& params, const Matrix& inputs) {
  params.validate();
  const Eigen::MatrixXcd x = lru_states(params, inputs, params.lambda(), params.gamma_vec());
  return lru_readout(params, inputs, x);
}

SequenceBatch lru_forward(const LruParams& params, const SequenceBatch& inputs) {
  SequenceBatch out;
  out.items.reserve(inputs.size());
  for (const auto& u : inputs.items) out.items.push_back(lru_forward_sequence(params, u));
  return out;
}

std::pair<double, Vector> lru_loss_and_gradient(const LruParams& params, const SequenceDataset& data,
                                                const std::vector<std::size_t>& indices) {
  params.validate();
  const auto idx = indices.empty() ? all_indices(data.size()) : indices;
  const double n = static_cast<double>(idx.size());
  const Eigen::Index h = params.d_hidden();
  const Eigen::VectorXcd lam = params.lambda();
  const Vector g = params.gamma_vec();
  const Eigen::MatrixXcd bc = params.B_re.cast<std::complex<double>>() + std::complex<double>(0, 1) * params.B_im;

  LruParams grad = params;
  for_each_lru_block(grad, [](auto& m) { m.setZero(); });
  Eigen::VectorXcd g_lam = Eigen::VectorXcd::Zero(h);
  Vector g_gamma = Vector::Zero(h);
  double loss = 0.0;

  for (const std::size_t i : idx) {
    const Matrix& u = data.inputs[i];
    const Eigen::Index T = u.rows();
    const Eigen::MatrixXcd x = lru_states(params, u, lam, g);
    const Matrix diff = lru_readout(params, u, x) - data.targets[i];
    const double scale = static_cast<double>(diff.size());
    loss += diff.squaredNorm() / scale / n;
    const Matrix dy = (2.0 / (scale * n)) * diff;  // T x d_out

    grad.D += dy.transpose() * u;
    grad.C_re += dy.transpose() * x.real().transpose();
    grad.C_im -= dy.transpose() * x.imag().transpose();
    // Direct gradient w.r.t. x_t (as re + i im) is conj(C)^T dy_t.
    const Matrix gx_re = params.C_re.transpose() * dy.transpose();
    const Matrix gx_im = -params.C_im.transpose() * dy.transpose();
    Eigen::MatrixXcd G(h, T);
    Eigen::VectorXcd carry = Eigen::VectorXcd::Zero(h);
    for (Eigen::Index t = T - 1; t >= 0; --t) {
      carry = lam.conjugate().cwiseProduct(carry);
      carry.real() += gx_re.col(t);
      carry.imag() += gx_im.col(t);
      G.col(t) = carry;
    }
    for (Eigen::Index t = 1; t < T; ++t) g_lam += G.col(t).cwiseProduct(x.col(t - 1).conjugate());
    const Eigen::MatrixXcd w = bc * u.transpose();
    g_gamma += G.cwiseProduct(w.conjugate()).real().rowwise().sum();
    grad.B_re += g.asDiagonal() * G.real() * u;
    grad.B_im += g.asDiagonal() * G.imag() * u;
  }

  for (Eigen::Index j = 0; j < h; ++j) {
    std::complex<double> dl_dnu, dl_dtheta;
    double dg_dnu = 0.0;
    const double mag2 = std::norm(lam(j));
    if (params.stable_exp) {
      const double e_nu = std::exp(params.nu_log(j));
      dl_dnu = -e_nu * lam(j);
      dl_dtheta = std::complex<double>(0, std::exp(params.theta_log(j))) * lam(j);
      if (params.gamma == GammaMode::Coupled) dg_dnu = e_nu * mag2 / g(j);
    } else {
      dl_dnu = std::polar(1.0, params.theta_log(j));
      dl_dtheta = std::complex<double>(0, 1) * lam(j);
      if (params.gamma == GammaMode::Coupled) dg_dnu = -params.nu_log(j) / g(j);
    }
    grad.nu_log(j) = (std::conj(g_lam(j)) * dl_dnu).real() + g_gamma(j) * dg_dnu;
    grad.theta_log(j) = (std::conj(g_lam(j)) * dl_dtheta).real();
  }
  return {loss, grad.pack()};
}

TrainReport fit_lru(const SequenceDataset& data, Eigen::Index d_hidden, const TrainConfig& cfg,
                    const LruOptions& opts) {
  cfg.validate();
  check_dataset(data);
  const auto start = std::chrono::steady_clock::now();
  LruParams work = lru_init(d_hidden, data.inputs.channels(), data.targets.channels(), opts, cfg.seed);
  Vector theta = work.pack();
  const LossGrad loss_grad = [&](const Vector& th, const std::vector<std::size_t>& idx) {
    work.unpack(th);
    return lru_loss_and_gradient(work, data, idx);
  };
  const auto check = [&](const Vector& th) {
    work.unpack(th);
    work.validate();
  };

  TrainReport report;
  report.config = cfg;
  report.seed = cfg.seed;
  report.initial_loss = loss_grad(theta, {}).first;
  const LoopResult res =
      run_loop(theta, loss_grad, Vector::Ones(theta.size()), data.size(), cfg, report, "fit_lru", false, check);
  report.final_params = theta;
  if (res.diverged) {
    report.converged = false;
    report.diagnostic = res.diagnostic;
    report.final_loss = std::numeric_limits<double>::infinity();
  } else {
    report.final_loss = loss_grad(theta, {}).first;
    report.converged = std::isfinite(report.final_loss) && report.final_loss <= 0.1 * report.initial_loss;
    if (!report.converged) report.diagnostic = "loss did not drop 10x below its initial value";
  }
  report.metrics["d_hidden"] = static_cast<double>(d_hidden);
  report.metrics["stable_exp"] = opts.stable_exp;
  report.metrics["gamma_norm"] = opts.gamma_norm;
  report.metrics["ring_init"] = opts.ring_init;
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---------------------------------------------------------------- K sweep

std::vector<KSweepResult> k_sweep(const LdsParams& lds, const std::vector<Eigen::Index>& K_values,
                                  const FilterBank& bank, const KSweepOptions& opts, const ThreadBudget& budget) {
  require(!K_values.empty(), "k_sweep: no K values");
  require(std::is_sorted(K_values.begin(), K_values.end()), "k_sweep: K values must be ascending");
  require(K_values.back() <= bank.K && K_values.front() >= 1, "k_sweep: K outside the filter bank");
  const SequenceDataset train = lds_dataset(lds, opts.train_sequences, opts.length, opts.seed);
  const SequenceDataset test = lds_dataset(lds, opts.test_sequences, opts.length, opts.seed + 1);
  std::vector<KSweepResult> rows(K_values.size());
  parallel_for(
      K_values.size(),
      [&](std::size_t i) {
        const Eigen::Index K = K_values[i];
        StuParams params;
        if (opts.least_squares) {
          params = fit_stu_least_squares(train, bank, K).params;
        } else {
          const TrainReport rep = fit_stu(train, bank, K, 0, opts.train);
          params = StuParams::zeros(bank.variant, K, lds.input_dim(), lds.output_dim());
          params.unpack(rep.final_params);
        }
        const StuProblem problem(bank, K, test);
        rows[i] = {K, stu_loss_and_gradient(params, problem).first};
      },
      budget);
  return rows;
}

std::string k_sweep_results_csv(const std::vector<KSweepResult>& rows) {
  std::ostringstream os;
  os << "K,final_error,ln_error\n";
  for (const auto& r : rows)
    os << r.K << ',' << io::format_real(r.final_error) << ',' << io::format_real(std::log(r.final_error)) << '\n';
  return os.str();
}

}  // namespace sssm
