#include "sssm/stu.hpp"

#include <cmath>

#include "json.hpp"
#include "sssm/io.hpp"

namespace sssm {

StuParams StuParams::zeros(HankelVariant variant, Eigen::Index K, Eigen::Index d_in, Eigen::Index d_out,
                           Eigen::Index k_y) {
  require(K >= 1 && d_in >= 1 && d_out >= 1 && k_y >= 0, "StuParams::zeros: dimensions must be positive");
  StuParams p;
  p.variant = variant;
  p.K = K;
  p.d_in = d_in;
  p.d_out = d_out;
  for (auto& m : p.M_u) m = Matrix::Zero(d_out, d_in);
  p.M_phi_plus.assign(static_cast<std::size_t>(K), Matrix::Zero(d_out, d_in));
  if (variant == HankelVariant::Primary) p.M_phi_minus.assign(static_cast<std::size_t>(K), Matrix::Zero(d_out, d_in));
  p.M_y.assign(static_cast<std::size_t>(k_y), Matrix::Zero(d_out, d_out));
  return p;
}

void StuParams::validate() const {
  require(K >= 1 && d_in >= 1 && d_out >= 1, "StuParams: K, d_in, d_out must be positive");
  auto shape_ok = [&](const Matrix& m, Eigen::Index r, Eigen::Index c) { return m.rows() == r && m.cols() == c; };
  for (const auto& m : M_u) require(shape_ok(m, d_out, d_in), "StuParams: M_u must be d_out x d_in");
  require(static_cast<Eigen::Index>(M_phi_plus.size()) == K, "StuParams: need K M_phi_plus matrices");
  for (const auto& m : M_phi_plus) require(shape_ok(m, d_out, d_in), "StuParams: M_phi_plus must be d_out x d_in");
  if (variant == HankelVariant::Alternative) {
    require(M_phi_minus.empty(), "StuParams: Alternative variant has no M_phi_minus");
  } else {
    require(static_cast<Eigen::Index>(M_phi_minus.size()) == K, "StuParams: need K M_phi_minus matrices");
    for (const auto& m : M_phi_minus) require(shape_ok(m, d_out, d_in), "StuParams: M_phi_minus must be d_out x d_in");
  }
  for (const auto& m : M_y) require(shape_ok(m, d_out, d_out), "StuParams: M_y must be d_out x d_out");
}

Eigen::Index StuParams::parameter_count() const {
  const Eigen::Index io = d_out * d_in;
  return 3 * io + static_cast<Eigen::Index>(M_phi_plus.size() + M_phi_minus.size()) * io + k_y() * d_out * d_out;
}

namespace {

template <typename P, typename F>
void for_each_matrix(P& p, F&& f) {
  for (auto& m : p.M_u) f(m);
  for (auto& m : p.M_phi_plus) f(m);
  for (auto& m : p.M_phi_minus) f(m);
  for (auto& m : p.M_y) f(m);
}

Matrix hstack(const std::vector<Matrix>& blocks, Eigen::Index rows) {
  Eigen::Index cols = 0;
  for (const auto& b : blocks) cols += b.cols();
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.middleCols(at, b.cols()) = b;
    at += b.cols();
  }
  return out;
}

}  // namespace

Vector StuParams::pack() const {
  Vector flat(parameter_count());
  Eigen::Index at = 0;
  for_each_matrix(*this, [&](const Matrix& m) {
    flat.segment(at, m.size()) = m.reshaped();
    at += m.size();
  });
  return flat;
}

void StuParams::unpack(const Vector& flat) {
  require(flat.size() == parameter_count(), "StuParams::unpack: size mismatch");
  Eigen::Index at = 0;
  for_each_matrix(*this, [&](Matrix& m) {
    m.reshaped() = flat.segment(at, m.size());
    at += m.size();
  });
}

Matrix StuParams::stacked_plus() const { return hstack(M_phi_plus, d_out); }
Matrix StuParams::stacked_minus() const { return hstack(M_phi_minus, d_out); }

SpectralFeaturizer::SpectralFeaturizer(const FilterBank& bank, Eigen::Index K, Eigen::Index max_len,
                                       FeatureScaling scaling, bool with_minus)
    : K_(K), max_len_(max_len), with_minus_(with_minus) {
  require(K >= 1 && K <= bank.K, "featurize: K exceeds the filter bank");
  require(max_len >= 1, "featurize: sequence length must be positive");
  require(max_len <= bank.L, "featurize: sequence longer than the filter bank length L");
  const Matrix& base = scaling == FeatureScaling::Scaled ? bank.scaled_phi : bank.phi;
  Matrix kernels(max_len, with_minus ? 2 * K : K);
  kernels.leftCols(K) = base.topLeftCorner(max_len, K);
  if (with_minus) {
    for (Eigen::Index i = 0; i < max_len; ++i) {
      const double sign = (i % 2 == 0) ? 1.0 : -1.0;
      kernels.row(i).tail(K) = sign * base.row(i).head(K);
    }
  }
  conv_ = std::make_shared<const CausalConvolver>(kernels, static_cast<std::size_t>(max_len));
}

SpectralFeatures SpectralFeaturizer::operator()(const Matrix& inputs) const {
  const Eigen::Index T = inputs.rows();
  const Eigen::Index d = inputs.cols();
  require(T >= 1 && T <= max_len_, "featurize: sequence longer than the filter bank length L");
  SpectralFeatures f;
  f.K = K_;
  f.d_in = d;
  f.plus.resize(T, K_ * d);
  if (with_minus_) f.minus.resize(T, K_ * d);
  const auto len = static_cast<std::size_t>(T);
  std::vector<ComplexVector> specs;
  specs.reserve(static_cast<std::size_t>(d));
  for (Eigen::Index c = 0; c < d; ++c) {
    const Vector col = inputs.col(c);
    specs.push_back(conv_->transform(std::span<const double>(col.data(), len)));
  }
  // Filter-major order keeps one kernel spectrum in cache across channels.
  for (Eigen::Index k = 0; k < K_; ++k)
    for (Eigen::Index c = 0; c < d; ++c) {
      const auto& spec = specs[static_cast<std::size_t>(c)];
      const std::span<double> plus(f.plus.col(k * d + c).data(), len);
      if (with_minus_)
        conv_->convolve_pair(spec, static_cast<std::size_t>(k), static_cast<std::size_t>(K_ + k), plus,
                             std::span<double>(f.minus.col(k * d + c).data(), len));
      else
        conv_->convolve(spec, static_cast<std::size_t>(k), plus);
    }
  return f;
}

Matrix SpectralFeaturizer::adjoint(const Matrix& grad_plus, const Matrix& grad_minus) const {
  const Eigen::Index T = grad_plus.rows();
  require(grad_plus.cols() % K_ == 0, "featurizer adjoint: gradient width must be K * d_in");
  const Eigen::Index d = grad_plus.cols() / K_;
  const bool minus = grad_minus.size() > 0;
  require(!minus || with_minus_, "featurizer adjoint: minus features were not configured");
  require(!minus || (grad_minus.rows() == T && grad_minus.cols() == grad_plus.cols()),
          "featurizer adjoint: minus gradient shape mismatch");
  Matrix out(T, d);
  const auto len = static_cast<std::size_t>(T);
  std::vector<CausalConvolver::CorrelationTerm> terms;
  for (Eigen::Index c = 0; c < d; ++c) {
    terms.clear();
    for (Eigen::Index k = 0; k < K_; ++k) {
      terms.push_back({std::span<const double>(grad_plus.col(k * d + c).data(), len), static_cast<std::size_t>(k)});
      if (minus)
        terms.push_back(
            {std::span<const double>(grad_minus.col(k * d + c).data(), len), static_cast<std::size_t>(K_ + k)});
    }
    conv_->correlate_sum(terms, std::span<double>(out.col(c).data(), len));
  }
  return out;
}

std::vector<SpectralFeatures> featurize(const FilterBank& bank, const SequenceBatch& inputs, FeatureScaling scaling) {
  std::vector<SpectralFeatures> out;
  if (inputs.empty()) return out;
  const Eigen::Index max_len = inputs.max_length();
  require(max_len <= bank.L, "featurize: sequence longer than the filter bank length L");
  const SpectralFeaturizer featurizer(bank, bank.K, max_len, scaling, true);
  out.reserve(inputs.size());
  for (const auto& u : inputs.items) out.push_back(featurizer(u));
  return out;
}

std::vector<SpectralFeatures> naive_featurize(const FilterBank& bank, const SequenceBatch& inputs,
                                              FeatureScaling scaling) {
  std::vector<SpectralFeatures> out;
  out.reserve(inputs.size());
  const Matrix& base = scaling == FeatureScaling::Scaled ? bank.scaled_phi : bank.phi;
  for (const auto& u : inputs.items) {
    const Eigen::Index T = u.rows();
    const Eigen::Index d = u.cols();
    require(T <= bank.L, "featurize: sequence longer than the filter bank length L");
    SpectralFeatures f;
    f.K = bank.K;
    f.d_in = d;
    f.plus = Matrix::Zero(T, bank.K * d);
    f.minus = Matrix::Zero(T, bank.K * d);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index k = 0; k < bank.K; ++k) {
        for (Eigen::Index i = 0; i <= t; ++i) {
          const double w = base(i, k);
          const double sign = (i % 2 == 0) ? 1.0 : -1.0;
          for (Eigen::Index c = 0; c < d; ++c) {
            f.plus(t, k * d + c) += u(t - i, c) * w;
            f.minus(t, k * d + c) += u(t - i, c) * sign * w;
          }
        }
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

Matrix stu_drive(const StuParams& params, const Matrix& inputs, const SpectralFeatures& features) {
  require(inputs.cols() == params.d_in, "STU forward: input channels do not match d_in");
  require(features.K == params.K && features.d_in == params.d_in && features.plus.rows() == inputs.rows(),
          "STU forward: features do not match params");
  const Eigen::Index T = inputs.rows();
  Matrix z = inputs * params.M_u[0].transpose();
  if (T > 1) z.bottomRows(T - 1) += inputs.topRows(T - 1) * params.M_u[1].transpose();
  if (T > 2) {
    z.bottomRows(T - 2) += inputs.topRows(T - 2) * params.M_u[2].transpose();
    z.bottomRows(T - 2) += features.plus.topRows(T - 2) * params.stacked_plus().transpose();
    if (params.has_minus()) {
      require(features.minus.rows() == T, "STU forward: minus features missing");
      z.bottomRows(T - 2) += features.minus.topRows(T - 2) * params.stacked_minus().transpose();
    }
  }
  return z;
}

Matrix stu_recursion(const StuParams& params, const Matrix& drive) {
  const Eigen::Index T = drive.rows();
  Matrix y = drive;
  if (!params.autoregressive()) {
    for (Eigen::Index r = 2; r < T; ++r) y.row(r) += y.row(r - 2);
    return y;
  }
  const Eigen::Index ky = params.k_y();
  for (Eigen::Index r = 0; r < T; ++r) {
    for (Eigen::Index i = 1; i <= std::min(ky, r); ++i)
      y.row(r) += y.row(r - i) * params.M_y[static_cast<std::size_t>(i - 1)].transpose();
  }
  return y;
}

Matrix stu_forward_sequence(const StuParams& params, const FilterBank& bank, const Matrix& inputs) {
  params.validate();
  require(params.variant == bank.variant, "STU forward: params and filter bank variants differ");
  require(params.K <= bank.K, "STU forward: params.K exceeds the filter bank");
  const SpectralFeaturizer featurizer(bank, params.K, inputs.rows(), FeatureScaling::Scaled, params.has_minus());
  return stu_recursion(params, stu_drive(params, inputs, featurizer(inputs)));
}

namespace {

SequenceBatch forward_batch(const StuParams& params, const FilterBank& bank, const SequenceBatch& inputs) {
  SequenceBatch out;
  if (inputs.empty()) return out;
  params.validate();
  require(params.K <= bank.K, "STU forward: params.K exceeds the filter bank");
  const SpectralFeaturizer featurizer(bank, params.K, inputs.max_length(), FeatureScaling::Scaled, params.has_minus());
  out.items.reserve(inputs.size());
  for (const auto& u : inputs.items) out.items.push_back(stu_recursion(params, stu_drive(params, u, featurizer(u))));
  return out;
}

}  // namespace

SequenceBatch stu_forward(const StuParams& params, const FilterBank& bank, const SequenceBatch& inputs) {
  require(params.variant == HankelVariant::Primary && bank.variant == HankelVariant::Primary,
          "stu_forward: requires Primary params and filter bank");
  require(!params.autoregressive(), "stu_forward: vanilla STU has no M_y (use ar_stu_forward)");
  return forward_batch(params, bank, inputs);
}

SequenceBatch ar_stu_forward(const StuParams& params, const FilterBank& bank, const SequenceBatch& inputs) {
  require(params.autoregressive(), "ar_stu_forward: requires k_y >= 1 M_y matrices");
  require(params.variant == bank.variant, "ar_stu_forward: params and filter bank variants differ");
  return forward_batch(params, bank, inputs);
}

SequenceBatch alt_stu_forward(const StuParams& params, const FilterBank& bank, const SequenceBatch& inputs) {
  require(params.variant == HankelVariant::Alternative && bank.variant == HankelVariant::Alternative,
          "alt_stu_forward: requires Alternative params and filter bank");
  require(!params.autoregressive(), "alt_stu_forward: M_y is not part of this variant");
  return forward_batch(params, bank, inputs);
}

StuGradients stu_backward(const StuParams& params, const Matrix& inputs, const SpectralFeatures& features,
                          const Matrix& output, const Matrix& grad_output, const SpectralFeaturizer* featurizer,
                          bool want_input_grad) {
  const Eigen::Index T = inputs.rows();
  require(grad_output.rows() == T && grad_output.cols() == params.d_out, "stu_backward: gradient shape mismatch");

  // Adjoint of the output recursion: lambda = dLoss/d(drive).
  Matrix lambda = grad_output;
  if (!params.autoregressive()) {
    for (Eigen::Index r = T - 3; r >= 0; --r) lambda.row(r) += lambda.row(r + 2);
  } else {
    const Eigen::Index ky = params.k_y();
    for (Eigen::Index r = T - 1; r >= 0; --r)
      for (Eigen::Index i = 1; i <= ky && r + i < T; ++i)
        lambda.row(r) += lambda.row(r + i) * params.M_y[static_cast<std::size_t>(i - 1)];
  }

  StuGradients g;
  g.params = StuParams::zeros(params.variant, params.K, params.d_in, params.d_out, params.k_y());
  for (Eigen::Index i = 1; i <= params.k_y() && i < T; ++i)
    g.params.M_y[static_cast<std::size_t>(i - 1)] = lambda.bottomRows(T - i).transpose() * output.topRows(T - i);
  g.params.M_u[0] = lambda.transpose() * inputs;
  if (T > 1) g.params.M_u[1] = lambda.bottomRows(T - 1).transpose() * inputs.topRows(T - 1);

  const Eigen::Index width = params.K * params.d_in;
  Matrix grad_plus, grad_minus;
  if (T > 2) {
    g.params.M_u[2] = lambda.bottomRows(T - 2).transpose() * inputs.topRows(T - 2);
    const Matrix dplus = lambda.bottomRows(T - 2).transpose() * features.plus.topRows(T - 2);
    for (Eigen::Index k = 0; k < params.K; ++k)
      g.params.M_phi_plus[static_cast<std::size_t>(k)] = dplus.middleCols(k * params.d_in, params.d_in);
    if (params.has_minus()) {
      const Matrix dminus = lambda.bottomRows(T - 2).transpose() * features.minus.topRows(T - 2);
      for (Eigen::Index k = 0; k < params.K; ++k)
        g.params.M_phi_minus[static_cast<std::size_t>(k)] = dminus.middleCols(k * params.d_in, params.d_in);
    }
  }

  if (want_input_grad) {
    require(featurizer != nullptr, "stu_backward: input gradient needs the featurizer");
    Matrix du = lambda * params.M_u[0];
    if (T > 1) du.topRows(T - 1) += lambda.bottomRows(T - 1) * params.M_u[1];
    grad_plus = Matrix::Zero(T, width);
    if (params.has_minus()) grad_minus = Matrix::Zero(T, width);
    if (T > 2) {
      du.topRows(T - 2) += lambda.bottomRows(T - 2) * params.M_u[2];
      grad_plus.topRows(T - 2) = lambda.bottomRows(T - 2) * params.stacked_plus();
      if (params.has_minus()) grad_minus.topRows(T - 2) = lambda.bottomRows(T - 2) * params.stacked_minus();
    }
    du += featurizer->adjoint(grad_plus, grad_minus);
    g.inputs = std::move(du);
  }
  return g;
}

void save_stu_params(const StuParams& params, const std::filesystem::path& dir) {
  params.validate();
  io::TensorContainer c;
  c.kind = "stu_params";
  c.meta_json = nlohmann::json{{"variant", to_string(params.variant)},
                               {"K", params.K},
                               {"d_in", params.d_in},
                               {"d_out", params.d_out},
                               {"k_y", params.k_y()}}
                    .dump();
  for (int i = 0; i < 3; ++i) c.add("M_u." + std::to_string(i + 1), params.M_u[static_cast<std::size_t>(i)]);
  for (std::size_t k = 0; k < params.M_phi_plus.size(); ++k) c.add("M_phi_plus." + std::to_string(k + 1), params.M_phi_plus[k]);
  for (std::size_t k = 0; k < params.M_phi_minus.size(); ++k)
    c.add("M_phi_minus." + std::to_string(k + 1), params.M_phi_minus[k]);
  for (std::size_t i = 0; i < params.M_y.size(); ++i) c.add("M_y." + std::to_string(i + 1), params.M_y[i]);
  c.save(dir);
}

StuParams load_stu_params(const std::filesystem::path& dir) {
  const auto c = io::TensorContainer::load(dir);
  if (c.kind != "stu_params") throw io::FormatError("container is not stu_params: " + c.kind);
  const auto meta = nlohmann::json::parse(c.meta_json);
  StuParams p = StuParams::zeros(parse_variant(meta.at("variant").get<std::string>()), meta.at("K").get<Eigen::Index>(),
                                 meta.at("d_in").get<Eigen::Index>(), meta.at("d_out").get<Eigen::Index>(),
                                 meta.at("k_y").get<Eigen::Index>());
  for (int i = 0; i < 3; ++i) p.M_u[static_cast<std::size_t>(i)] = c.get("M_u." + std::to_string(i + 1));
  for (std::size_t k = 0; k < p.M_phi_plus.size(); ++k) p.M_phi_plus[k] = c.get("M_phi_plus." + std::to_string(k + 1));
  for (std::size_t k = 0; k < p.M_phi_minus.size(); ++k) p.M_phi_minus[k] = c.get("M_phi_minus." + std::to_string(k + 1));
  for (std::size_t i = 0; i < p.M_y.size(); ++i) p.M_y[i] = c.get("M_y." + std::to_string(i + 1));
  p.validate();
  return p;
}

}  // namespace sssm
