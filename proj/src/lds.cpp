#include "sssm/lds.hpp"

#include <cmath>

#include "json.hpp"
#include "sssm/io.hpp"
#include "sssm/rng.hpp"
#include "sssm/symmetric_eigen.hpp"

namespace sssm {

using nlohmann::json;

LdsParams LdsParams::diagonal(Vector a, Matrix b, Matrix c, Matrix d) {
  LdsParams p;
  p.storage = Storage::Diagonal;
  p.a_diag = std::move(a);
  p.B = std::move(b);
  p.C = std::move(c);
  p.D = std::move(d);
  p.validate();
  return p;
}

LdsParams LdsParams::dense(Matrix a, Matrix b, Matrix c, Matrix d) {
  LdsParams p;
  p.storage = Storage::Dense;
  p.a_dense = std::move(a);
  p.B = std::move(b);
  p.C = std::move(c);
  p.D = std::move(d);
  p.validate();
  return p;
}

Matrix LdsParams::A() const {
  if (storage == Storage::Dense) return a_dense;
  return a_diag.asDiagonal();
}

Vector LdsParams::apply_A(const Vector& x) const {
  if (storage == Storage::Dense) return a_dense * x;
  return a_diag.cwiseProduct(x);
}

void LdsParams::validate() const {
  const Eigen::Index dh = B.rows();
  require(dh >= 1 && B.cols() >= 1 && C.rows() >= 1, "LdsParams: dimensions must be positive");
  require(C.cols() == dh, "LdsParams: C must have d_h columns");
  require(D.rows() == C.rows() && D.cols() == B.cols(), "LdsParams: D must be d_out x d_in");
  if (storage == Storage::Diagonal) {
    require(a_diag.size() == dh, "LdsParams: diagonal A must have length d_h");
  } else {
    require(a_dense.rows() == dh && a_dense.cols() == dh, "LdsParams: A must be d_h x d_h");
    require((a_dense - a_dense.transpose()).cwiseAbs().maxCoeff() <= 1e-12, "LdsParams: dense A must be symmetric");
  }
}

double LdsParams::spectral_radius() const {
  if (storage == Storage::Diagonal) return a_diag.cwiseAbs().maxCoeff();
  return symmetric_eigen(a_dense, false).values.cwiseAbs().maxCoeff();
}

Matrix simulate_states(const LdsParams& params, const Matrix& inputs, const std::optional<Vector>& x0) {
  require(inputs.cols() == params.input_dim(), "simulate_lds: input channels do not match B");
  Vector x = x0 ? *x0 : Vector::Zero(params.hidden_dim());
  require(x.size() == params.hidden_dim(), "simulate_lds: x0 has wrong dimension");
  Matrix states(inputs.rows(), params.hidden_dim());
  for (Eigen::Index t = 0; t < inputs.rows(); ++t) {
    x = params.apply_A(x) + params.B * inputs.row(t).transpose();
    states.row(t) = x.transpose();
  }
  return states;
}

Matrix simulate_sequence(const LdsParams& params, const Matrix& inputs, const std::optional<Vector>& x0) {
  require(inputs.rows() >= 1, "simulate_lds: sequence length must be positive");
  const Matrix states = simulate_states(params, inputs, x0);
  return states * params.C.transpose() + inputs * params.D.transpose();
}

SequenceBatch simulate_lds(const LdsParams& params, const SequenceBatch& inputs, const std::optional<Vector>& x0) {
  SequenceBatch out;
  out.items.reserve(inputs.size());
  for (const auto& u : inputs.items) out.items.push_back(simulate_sequence(params, u, x0));
  return out;
}

LdsParams random_marginal_system(Eigen::Index d_h, Eigen::Index d_in, Eigen::Index d_out, double rho,
                                 std::uint64_t seed) {
  require(rho > 0.0 && rho <= 1.0, "random_marginal_system: rho must lie in (0, 1]");
  require(d_h >= 1 && d_in >= 1 && d_out >= 1, "random_marginal_system: dimensions must be positive");
  Rng rng(seed);
  Vector a(d_h);
  for (Eigen::Index i = 0; i < d_h; ++i) a(i) = rho * rng.sign();
  Matrix b = rng.normal_matrix(d_h, d_in);
  Matrix c = rng.normal_matrix(d_out, d_h);
  Matrix d = Matrix::Zero(d_out, d_in);
  for (Eigen::Index i = 0; i < std::min(d_out, d_in); ++i) d(i, i) = rng.normal();
  return LdsParams::diagonal(std::move(a), std::move(b), std::move(c), std::move(d));
}

Matrix random_orthogonal(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix g = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

LdsParams random_symmetric_system(Eigen::Index d_h, Eigen::Index d_in, Eigen::Index d_out, double radius,
                                  std::uint64_t seed, double scale) {
  require(radius >= 0.0 && radius <= 1.0, "random_symmetric_system: radius must lie in [0, 1]");
  Rng rng(seed);
  Vector lambda(d_h);
  for (Eigen::Index i = 0; i < d_h; ++i) lambda(i) = rng.uniform(-radius, radius);
  const Matrix q = random_orthogonal(d_h, seed ^ 0x9e3779b97f4a7c15ULL);
  Matrix a = q * lambda.asDiagonal() * q.transpose();
  a = 0.5 * (a + a.transpose()).eval();
  Matrix b = scale * rng.normal_matrix(d_h, d_in);
  Matrix c = scale * rng.normal_matrix(d_out, d_h);
  Matrix d = scale * rng.normal_matrix(d_out, d_in);
  return LdsParams::dense(std::move(a), std::move(b), std::move(c), std::move(d));
}

std::vector<Matrix> markov_params(const LdsParams& params, Eigen::Index horizon) {
  require(horizon >= 0, "markov_params: horizon must be non-negative");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(horizon + 1));
  out.push_back(params.D);
  Matrix power_b = params.B;  // A^{i} B
  for (Eigen::Index i = 1; i <= horizon; ++i) {
    out.push_back(params.C * power_b);
    for (Eigen::Index j = 0; j < power_b.cols(); ++j) power_b.col(j) = params.apply_A(power_b.col(j));
  }
  return out;
}

Matrix apply_markov(const std::vector<Matrix>& markov, const Matrix& inputs) {
  const auto T = inputs.rows();
  require(static_cast<Eigen::Index>(markov.size()) >= T + 1, "apply_markov: horizon shorter than the sequence");
  Matrix y = Matrix::Zero(T, markov.front().rows());
  for (Eigen::Index t = 0; t < T; ++t) {
    Vector acc = markov[0] * inputs.row(t).transpose();
    for (Eigen::Index lag = 0; lag <= t; ++lag) acc += markov[static_cast<std::size_t>(lag + 1)] * inputs.row(t - lag).transpose();
    y.row(t) = acc.transpose();
  }
  return y;
}

SequenceBatch gaussian_inputs(std::size_t batch, Eigen::Index length, Eigen::Index channels, std::uint64_t seed) {
  Rng rng(seed);
  SequenceBatch out;
  out.items.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) out.items.push_back(rng.normal_matrix(length, channels));
  return out;
}

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

Matrix matrix_from_json(const json& j, const char* name) {
  if (!j.is_array() || j.empty() || !j.front().is_array())
    throw io::FormatError(std::string("fixture field '") + name + "' must be a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(row.size()) != cols)
      throw io::FormatError(std::string("fixture field '") + name + "' is ragged");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

LdsParams lds_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("malformed system fixture: ") + e.what());
  }
  const std::string storage = j.value("storage", std::string{"dense"});
  Matrix b = matrix_from_json(j.at("B"), "B");
  Matrix c = matrix_from_json(j.at("C"), "C");
  Matrix d = matrix_from_json(j.at("D"), "D");
  if (storage == "diagonal") {
    const auto diag = j.at("A").get<std::vector<double>>();
    return LdsParams::diagonal(Eigen::Map<const Vector>(diag.data(), static_cast<Eigen::Index>(diag.size())),
                               std::move(b), std::move(c), std::move(d));
  }
  if (storage == "dense") return LdsParams::dense(matrix_from_json(j.at("A"), "A"), std::move(b), std::move(c), std::move(d));
  throw io::FormatError("fixture storage must be 'diagonal' or 'dense'");
}

std::string lds_to_json(const LdsParams& p) {
  json j;
  if (p.storage == LdsParams::Storage::Diagonal) {
    j["storage"] = "diagonal";
    j["A"] = std::vector<double>(p.a_diag.data(), p.a_diag.data() + p.a_diag.size());
  } else {
    j["storage"] = "dense";
    j["A"] = matrix_to_json(p.a_dense);
  }
  j["B"] = matrix_to_json(p.B);
  j["C"] = matrix_to_json(p.C);
  j["D"] = matrix_to_json(p.D);
  return j.dump(2) + "\n";
}

LdsParams load_lds(const std::filesystem::path& path) { return lds_from_json(io::read_text(path)); }

void save_lds(const LdsParams& params, const std::filesystem::path& path) { io::write_text(path, lds_to_json(params)); }

LdsParams sec31_fixture() {
  Vector a(4);
  a << -0.9999, 0.9999, -0.9999, 0.9999;
  Matrix b(4, 3);
  b << 0.36858183, -0.34219486, 0.1407376,  //
      0.18933886, -0.1243964, 0.21866894,   //
      0.14593862, -0.5791096, -0.06816235,  //
      -0.3095346, -0.21441863, 0.08696061;
  Matrix c(3, 4);
  c << 0.5528727, -0.51329225, 0.21110639, 0.2840083,  //
      -0.18659459, 0.3280034, 0.21890792, -0.8686644,  //
      -0.10224352, -0.46430188, -0.32162794, 0.1304409;
  Matrix d = Matrix::Zero(3, 3);
  d(0, 0) = 1.5905786;
  d(1, 1) = -0.45901108;
  d(2, 2) = 0.3238576;
  return LdsParams::diagonal(std::move(a), std::move(b), std::move(c), std::move(d));
}

}  // namespace sssm
