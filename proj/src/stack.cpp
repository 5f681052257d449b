#include "sssm/stack.hpp"

#include <chrono>
#include <cmath>

#include "json.hpp"
#include "sssm/io.hpp"
#include "sssm/lds.hpp"
#include "sssm/rng.hpp"

namespace sssm {

using nlohmann::json;

std::string to_string(Pooling p) { return p == Pooling::Mean ? "mean" : "last"; }

Pooling parse_pooling(const std::string& name) {
  if (name == "mean") return Pooling::Mean;
  if (name == "last") return Pooling::Last;
  throw DomainError("pooling must be 'mean' or 'last': " + name);
}

void StackConfig::validate() const {
  require(n_layers >= 1 && d_model >= 1, "StackConfig: n_layers and d_model must be positive");
  require(K >= 1 && K <= L && k_y >= 0, "StackConfig: need 1 <= K <= L and k_y >= 0");
  require(d_input >= 1 && n_classes >= 2, "StackConfig: need d_input >= 1 and n_classes >= 2");
  require(layer_input_scale > 0.0, "StackConfig: layer_input_scale must be positive");
}

std::string StackConfig::to_json() const {
  return json{{"n_layers", n_layers},   {"d_model", d_model},     {"K", K},
              {"k_y", k_y},             {"d_input", d_input},     {"n_classes", n_classes},
              {"L", L},                 {"pooling", sssm::to_string(pooling)},
              {"layer_input_scale", layer_input_scale}}
      .dump();
}

StackConfig StackConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("malformed stack config: ") + e.what());
  }
  StackConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.K = j.value("K", c.K);
  c.k_y = j.value("k_y", c.k_y);
  c.d_input = j.value("d_input", c.d_input);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.L = j.value("L", c.L);
  c.pooling = parse_pooling(j.value("pooling", std::string{"mean"}));
  c.layer_input_scale = j.value("layer_input_scale", c.layer_input_scale);
  c.validate();
  return c;
}

StackModel StackModel::zeros(const StackConfig& config, std::shared_ptr<const FilterBank> bank) {
  config.validate();
  require(bank != nullptr && bank->variant == HankelVariant::Primary, "StackModel: needs a Primary filter bank");
  require(bank->K >= config.K && bank->L >= config.L, "StackModel: filter bank smaller than the config");
  StackModel m;
  m.config = config;
  m.bank = std::move(bank);
  m.featurizer = std::make_shared<const SpectralFeaturizer>(*m.bank, config.K, config.L, FeatureScaling::Scaled, true);
  const Eigen::Index d = config.d_model;
  m.W_embed = Matrix::Zero(d, config.d_input);
  m.b_embed = Vector::Zero(d);
  for (Eigen::Index l = 0; l < config.n_layers; ++l) {
    StackLayer layer;
    layer.stu = StuParams::zeros(HankelVariant::Primary, config.K, d, d, config.k_y);
    layer.W_a = Matrix::Zero(d, d);
    layer.W_b = Matrix::Zero(d, d);
    layer.b_a = Vector::Zero(d);
    layer.b_b = Vector::Zero(d);
    m.layers.push_back(std::move(layer));
  }
  m.W_out = Matrix::Zero(config.n_classes, d);
  m.b_out = Vector::Zero(config.n_classes);
  return m;
}

StackModel StackModel::random(const StackConfig& config, std::shared_ptr<const FilterBank> bank, std::uint64_t seed) {
  StackModel m = zeros(config, std::move(bank));
  Rng rng(seed);
  const double d = static_cast<double>(config.d_model);
  m.W_embed = rng.normal_matrix(config.d_model, config.d_input) / std::sqrt(static_cast<double>(config.d_input));
  // The y_{t-2} coupling sums roughly L/2 drive terms, so the STU starts small.
  const double stu_std = 0.1 / std::sqrt(d);
  for (auto& layer : m.layers) {
    for (auto& mu : layer.stu.M_u) mu = stu_std * rng.normal_matrix(config.d_model, config.d_model);
    for (auto& mp : layer.stu.M_phi_plus) mp = stu_std * rng.normal_matrix(config.d_model, config.d_model);
    for (auto& mm : layer.stu.M_phi_minus) mm = stu_std * rng.normal_matrix(config.d_model, config.d_model);
    layer.W_a = rng.normal_matrix(config.d_model, config.d_model) / std::sqrt(d);
    layer.W_b = rng.normal_matrix(config.d_model, config.d_model) / std::sqrt(d);
  }
  m.W_out = rng.normal_matrix(config.n_classes, config.d_model) / std::sqrt(d);
  return m;
}

namespace {

template <typename M, typename F>
void for_each_dense(M& model, F&& f) {
  f(model.W_embed);
  f(model.b_embed);
  for (auto& layer : model.layers) {
    f(layer.stu);
    f(layer.W_a);
    f(layer.b_a);
    f(layer.W_b);
    f(layer.b_b);
  }
  f(model.W_out);
  f(model.b_out);
}

Eigen::Index block_size(const StuParams& p) { return p.parameter_count(); }
template <typename D>
Eigen::Index block_size(const Eigen::PlainObjectBase<D>& m) {
  return m.size();
}

}  // namespace

Eigen::Index StackModel::parameter_count() const {
  Eigen::Index n = 0;
  for_each_dense(*this, [&](const auto& b) { n += block_size(b); });
  return n;
}

Vector StackModel::pack() const {
  Vector out(parameter_count());
  Eigen::Index at = 0;
  for_each_dense(*this, [&](const auto& b) {
    using B = std::decay_t<decltype(b)>;
    if constexpr (std::is_same_v<B, StuParams>) {
      const Vector v = b.pack();
      out.segment(at, v.size()) = v;
      at += v.size();
    } else {
      out.segment(at, b.size()) = Eigen::Map<const Vector>(b.data(), b.size());
      at += b.size();
    }
  });
  return out;
}

void StackModel::unpack(const Vector& flat) {
  require(flat.size() == parameter_count(), "StackModel::unpack: size mismatch");
  Eigen::Index at = 0;
  for_each_dense(*this, [&](auto& b) {
    using B = std::decay_t<decltype(b)>;
    if constexpr (std::is_same_v<B, StuParams>) {
      const Eigen::Index n = b.parameter_count();
      b.unpack(flat.segment(at, n));
      at += n;
    } else {
      Eigen::Map<Vector>(b.data(), b.size()) = flat.segment(at, b.size());
      at += b.size();
    }
  });
}

namespace {

struct LayerCache {
  Matrix h_in;  // scaled STU input
  SpectralFeatures features;
  Matrix y, a, s;
};

struct ItemCache {
  std::vector<LayerCache> layers;
  Matrix h_last;
  Vector pooled;
};

Matrix add_bias(Matrix m, const Vector& b) {
  m.rowwise() += b.transpose();
  return m;
}

Vector forward_item(const StackModel& model, const Matrix& u, ItemCache* cache) {
  const StackConfig& cfg = model.config;
  require(u.cols() == cfg.d_input, "stack_forward: input channels do not match the embedding");
  require(u.rows() >= 1 && u.rows() <= cfg.L, "stack_forward: sequence longer than the filter bank length L");
  Matrix h = add_bias(u * model.W_embed.transpose(), model.b_embed);
  if (cache) cache->layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const StackLayer& layer = model.layers[l];
    Matrix h_in = cfg.layer_input_scale * h;
    SpectralFeatures f = (*model.featurizer)(h_in);
    Matrix y = stu_recursion(layer.stu, stu_drive(layer.stu, h_in, f));
    Matrix a = add_bias(y * layer.W_a.transpose(), layer.b_a);
    Matrix s = add_bias(y * layer.W_b.transpose(), layer.b_b);
    s = (1.0 + (-s.array()).exp()).inverse().matrix();
    h = a.cwiseProduct(s);
    if (cache) cache->layers[l] = {std::move(h_in), std::move(f), std::move(y), std::move(a), std::move(s)};
  }
  Vector pooled = cfg.pooling == Pooling::Mean ? Vector(h.colwise().mean().transpose())
                                               : Vector(h.row(h.rows() - 1).transpose());
  if (cache) {
    cache->h_last = h;
    cache->pooled = pooled;
  }
  return model.W_out * pooled + model.b_out;
}

/// Cross-entropy of one logit row and its gradient.
double softmax_ce(const Vector& logits, int label, Vector* dlogits) {
  const double m = logits.maxCoeff();
  const Vector e = (logits.array() - m).exp().matrix();
  const double z = e.sum();
  if (dlogits) {
    *dlogits = e / z;
    (*dlogits)(label) -= 1.0;
  }
  return std::log(z) + m - logits(label);
}

void check_labels(const StackModel& model, const SequenceBatch& inputs, const std::vector<int>& labels) {
  require(!inputs.empty() && inputs.size() == labels.size(), "stack: need one label per sequence");
  for (const int y : labels) require(y >= 0 && y < model.config.n_classes, "stack: label out of range");
}

Vector item_gradient(const StackModel& model, const Matrix& u, int label, double weight, double& loss) {
  ItemCache cache;
  const Vector logits = forward_item(model, u, &cache);
  Vector dlogits;
  loss = softmax_ce(logits, label, &dlogits);
  dlogits *= weight;

  StackModel g = model;
  for_each_dense(g, [](auto& b) {
    using B = std::decay_t<decltype(b)>;
    if constexpr (std::is_same_v<B, StuParams>) {
      b.unpack(Vector::Zero(b.parameter_count()));
    } else {
      b.setZero();
    }
  });
  g.W_out = dlogits * cache.pooled.transpose();
  g.b_out = dlogits;
  const Vector dpooled = model.W_out.transpose() * dlogits;
  const Eigen::Index T = u.rows();
  Matrix dh = Matrix::Zero(T, model.config.d_model);
  if (model.config.pooling == Pooling::Mean) {
    dh.rowwise() = dpooled.transpose() / static_cast<double>(T);
  } else {
    dh.row(T - 1) = dpooled.transpose();
  }

  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const StackLayer& layer = model.layers[l];
    const LayerCache& c = cache.layers[l];
    const Matrix da = dh.cwiseProduct(c.s);
    const Matrix db = dh.cwiseProduct(c.a).cwiseProduct(c.s).cwiseProduct((1.0 - c.s.array()).matrix());
    StackLayer& gl = g.layers[l];
    gl.W_a = da.transpose() * c.y;
    gl.b_a = da.colwise().sum().transpose();
    gl.W_b = db.transpose() * c.y;
    gl.b_b = db.colwise().sum().transpose();
    const Matrix dy = da * layer.W_a + db * layer.W_b;
    StuGradients sg = stu_backward(layer.stu, c.h_in, c.features, c.y, dy, model.featurizer.get(), true);
    gl.stu = std::move(sg.params);
    dh = model.config.layer_input_scale * sg.inputs;
  }
  g.W_embed = dh.transpose() * u;
  g.b_embed = dh.colwise().sum().transpose();
  return g.pack();
}

}  // namespace

Matrix stack_forward(const StackModel& model, const SequenceBatch& inputs, const ThreadBudget& budget) {
  Matrix logits(static_cast<Eigen::Index>(inputs.size()), model.config.n_classes);
  parallel_for(
      inputs.size(),
      [&](std::size_t i) { logits.row(static_cast<Eigen::Index>(i)) = forward_item(model, inputs[i], nullptr).transpose(); },
      budget);
  return logits;
}

double stack_loss(const StackModel& model, const SequenceBatch& inputs, const std::vector<int>& labels,
                  const ThreadBudget& budget) {
  check_labels(model, inputs, labels);
  const Matrix logits = stack_forward(model, inputs, budget);
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    loss += softmax_ce(logits.row(static_cast<Eigen::Index>(i)).transpose(), labels[i], nullptr);
  return loss / static_cast<double>(labels.size());
}

StackGradients stack_gradients(const StackModel& model, const SequenceBatch& inputs, const std::vector<int>& labels,
                               const ThreadBudget& budget) {
  check_labels(model, inputs, labels);
  const double w = 1.0 / static_cast<double>(labels.size());
  std::vector<Vector> grads(labels.size());
  std::vector<double> losses(labels.size());
  parallel_for(
      labels.size(), [&](std::size_t i) { grads[i] = item_gradient(model, inputs[i], labels[i], w, losses[i]); },
      budget);
  StackGradients out;
  out.grad = Vector::Zero(model.parameter_count());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.grad += grads[i];
    out.loss += losses[i] * w;
  }
  return out;
}

double stack_accuracy(const StackModel& model, const SequenceBatch& inputs, const std::vector<int>& labels,
                      const ThreadBudget& budget) {
  check_labels(model, inputs, labels);
  const Matrix logits = stack_forward(model, inputs, budget);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Eigen::Index best;
    logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    hits += best == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------- tasks

std::string to_string(StackTask t) {
  switch (t) {
    case StackTask::DelayedRecall:
      return "delayed_recall";
    case StackTask::ParityPrefix:
      return "parity_prefix";
    case StackTask::NoisyLdsClass:
      return "noisy_lds_class";
  }
  return "unknown";
}

StackTask parse_task(const std::string& name) {
  if (name == "delayed_recall") return StackTask::DelayedRecall;
  if (name == "parity_prefix") return StackTask::ParityPrefix;
  if (name == "noisy_lds_class") return StackTask::NoisyLdsClass;
  throw DomainError("unknown task: " + name);
}

namespace {

ClassificationData generate_split(const TaskConfig& task, std::size_t count, std::uint64_t seed,
                                  const LdsParams* lds) {
  Rng rng(seed);
  ClassificationData d;
  const Eigen::Index T = task.length;
  for (std::size_t n = 0; n < count; ++n) {
    Matrix u;
    int label = 0;
    switch (task.task) {
      case StackTask::DelayedRecall: {
        u = task.noise * rng.normal_matrix(T, task.n_symbols);
        label = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.n_symbols)));
        u(T - 1 - task.delay, label) += 1.0;
        break;
      }
      case StackTask::ParityPrefix: {
        const Matrix clean = rng.normal_matrix(T, 1);
        double sum = 0.0;
        for (Eigen::Index r = T - 1; r >= 0; r -= 2) sum += clean(r, 0);
        label = sum > 0.0 ? 1 : 0;
        u = clean + task.noise * rng.normal_matrix(T, 1);
        break;
      }
      case StackTask::NoisyLdsClass: {
        const Matrix clean = rng.normal_matrix(T, lds->input_dim());
        const double pooled = simulate_sequence(*lds, clean).mean();
        label = pooled > 0.0 ? 1 : 0;
        u = clean + task.noise * rng.normal_matrix(T, lds->input_dim());
        break;
      }
    }
    d.inputs.items.push_back(std::move(u));
    d.labels.push_back(label);
  }
  d.n_classes = task.task == StackTask::DelayedRecall ? task.n_symbols : 2;
  if (task.random_labels) {
    Rng shuffle(seed ^ 0x5bd1e995ULL);
    for (auto& y : d.labels) y = static_cast<int>(shuffle.below(static_cast<std::uint64_t>(d.n_classes)));
  }
  return d;
}

}  // namespace

TaskSplit make_task(const TaskConfig& task) {
  require(task.length >= 1 && task.n_train >= 1 && task.n_test >= 1, "make_task: sizes must be positive");
  require(task.noise >= 0.0, "make_task: noise must be non-negative");
  if (task.task == StackTask::DelayedRecall) {
    require(task.n_symbols >= 2, "make_task: delayed_recall needs at least 2 symbols");
    require(task.delay >= 0 && task.delay < task.length, "make_task: delay must lie in [0, length)");
  }
  std::optional<LdsParams> lds;
  if (task.task == StackTask::NoisyLdsClass) lds = random_marginal_system(4, 2, 1, 0.99, task.seed ^ 0xa5a5ULL);
  TaskSplit split;
  split.train = generate_split(task, task.n_train, task.seed * 2 + 1, lds ? &*lds : nullptr);
  split.test = generate_split(task, task.n_test, task.seed * 2 + 2, lds ? &*lds : nullptr);
  return split;
}

StackTrainResult train_stack(const TaskSplit& data, const StackConfig& config, const TrainConfig& cfg,
                             const ThreadBudget& budget) {
  cfg.validate();
  config.validate();
  require(data.train.inputs.channels() == config.d_input, "train_stack: task channels differ from d_input");
  require(data.train.n_classes == config.n_classes, "train_stack: task classes differ from n_classes");
  const auto start = std::chrono::steady_clock::now();
  auto bank = std::make_shared<const FilterBank>(cached_filterbank(config.L, config.K, HankelVariant::Primary));
  StackModel model = StackModel::random(config, bank, cfg.seed);
  Vector theta = model.pack();
  Vector lr_scale = Vector::Ones(theta.size());
  Optimizer opt(cfg, theta.size());
  Rng rng(cfg.seed ^ 0x9e3779b9ULL);

  const std::size_t n = data.train.labels.size();
  const bool full_batch = cfg.batch_size >= n;
  StackTrainResult out;
  TrainReport& report = out.report;
  report.config = cfg;
  report.seed = cfg.seed;
  report.initial_loss = stack_loss(model, data.train.inputs, data.train.labels, budget);
  report.loss_curve.reserve(cfg.steps);
  SequenceBatch batch;
  std::vector<int> labels;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    StackGradients g;
    if (full_batch) {
      g = stack_gradients(model, data.train.inputs, data.train.labels, budget);
    } else {
      batch.items.clear();
      labels.clear();
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const auto i = static_cast<std::size_t>(rng.below(n));
        batch.items.push_back(data.train.inputs[i]);
        labels.push_back(data.train.labels[i]);
      }
      g = stack_gradients(model, batch, labels, budget);
    }
    if (!std::isfinite(g.loss) || !g.grad.allFinite()) throw NonFiniteLoss("train_stack: non-finite loss", static_cast<long>(step));
    report.loss_curve.push_back(g.loss);
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0)
      report.eval_curve.emplace_back(step, stack_loss(model, data.train.inputs, data.train.labels, budget));
    opt.step(theta, g.grad, lr_scale, step);
    model.unpack(theta);
  }
  report.final_loss = stack_loss(model, data.train.inputs, data.train.labels, budget);
  report.final_params = theta;
  out.train_accuracy = stack_accuracy(model, data.train.inputs, data.train.labels, budget);
  out.test_accuracy = stack_accuracy(model, data.test.inputs, data.test.labels, budget);
  report.metrics["train_accuracy"] = out.train_accuracy;
  report.metrics["test_accuracy"] = out.test_accuracy;
  report.converged = std::isfinite(report.final_loss);
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.model = std::move(model);
  return out;
}

StackTrainResult train_stack(const TaskConfig& task, StackConfig config, const TrainConfig& train,
                             const ThreadBudget& budget) {
  const TaskSplit data = make_task(task);
  config.d_input = data.train.inputs.channels();
  config.n_classes = data.train.n_classes;
  require(task.length <= config.L, "train_stack: task length exceeds the filter bank length L");
  return train_stack(data, config, train, budget);
}

void save_stack_model(const StackModel& model, const std::filesystem::path& dir) {
  io::TensorContainer c;
  c.kind = "stack_model";
  c.meta_json = model.config.to_json();
  c.add("W_embed", model.W_embed);
  c.add("b_embed", model.b_embed);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    c.add(p + "stu", model.layers[l].stu.pack());
    c.add(p + "W_a", model.layers[l].W_a);
    c.add(p + "b_a", model.layers[l].b_a);
    c.add(p + "W_b", model.layers[l].W_b);
    c.add(p + "b_b", model.layers[l].b_b);
  }
  c.add("W_out", model.W_out);
  c.add("b_out", model.b_out);
  c.save(dir);
}

StackModel load_stack_model(const std::filesystem::path& dir) {
  const auto c = io::TensorContainer::load(dir);
  if (c.kind != "stack_model") throw io::FormatError("container is not stack_model: " + c.kind);
  const StackConfig config = StackConfig::from_json(c.meta_json);
  auto bank = std::make_shared<const FilterBank>(cached_filterbank(config.L, config.K, HankelVariant::Primary));
  StackModel m = StackModel::zeros(config, bank);
  auto take = [&](const std::string& name, auto& dst) {
    const Matrix& src = c.get(name);
    if (src.size() != dst.size()) throw io::FormatError("tensor has the wrong shape: " + name);
    Eigen::Map<Vector>(dst.data(), dst.size()) = Eigen::Map<const Vector>(src.data(), src.size());
  };
  take("W_embed", m.W_embed);
  take("b_embed", m.b_embed);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Vector stu(m.layers[l].stu.parameter_count());
    take(p + "stu", stu);
    m.layers[l].stu.unpack(stu);
    take(p + "W_a", m.layers[l].W_a);
    take(p + "b_a", m.layers[l].b_a);
    take(p + "W_b", m.layers[l].W_b);
    take(p + "b_b", m.layers[l].b_b);
  }
  take("W_out", m.W_out);
  take("b_out", m.b_out);
  return m;
}

}  // namespace sssm
