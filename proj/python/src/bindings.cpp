#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <optional>

#include "sssm/filterbank.hpp"
#include "sssm/lds.hpp"
#include "sssm/stack.hpp"
#include "sssm/stu.hpp"
#include "sssm/theory.hpp"
#include "sssm/trainer.hpp"

namespace py = pybind11;
using namespace sssm;

namespace {

SequenceBatch to_batch(std::vector<Matrix> seqs) { return SequenceBatch(std::move(seqs)); }

std::vector<Matrix> from_batch(SequenceBatch b) { return std::move(b.items); }

SequenceDataset to_dataset(std::vector<Matrix> inputs, std::vector<Matrix> targets) {
  SequenceDataset d;
  d.inputs = to_batch(std::move(inputs));
  d.targets = to_batch(std::move(targets));
  return d;
}

py::dict report_dict(const TrainReport& r) {
  py::dict d;
  d["loss_curve"] = r.loss_curve;
  d["eval_curve"] = r.eval_curve;
  d["final_params"] = r.final_params;
  d["initial_loss"] = r.initial_loss;
  d["final_loss"] = r.final_loss;
  d["converged"] = r.converged;
  d["diagnostic"] = r.diagnostic;
  d["metrics"] = r.metrics;
  return d;
}

TrainConfig train_config(double lr, std::size_t steps, std::size_t batch, std::uint64_t seed,
                         const std::string& schedule) {
  TrainConfig c;
  c.learning_rate = lr;
  c.steps = steps;
  c.batch_size = batch;
  c.seed = seed;
  c.schedule = schedule == "constant" ? LrSchedule::Constant : LrSchedule::WarmupCosine;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Spectral filter banks, STU layers, LDS simulation and training.";

  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<NonFiniteLoss>(m, "NonFiniteLoss", PyExc_ArithmeticError);
  py::register_exception<ConvergenceError>(m, "ConvergenceError", PyExc_RuntimeError);

  py::enum_<HankelVariant>(m, "HankelVariant")
      .value("Primary", HankelVariant::Primary)
      .value("Alternative", HankelVariant::Alternative);

  // filterbank
  py::class_<FilterBank, std::shared_ptr<FilterBank>>(m, "FilterBank")
      .def_readonly("L", &FilterBank::L)
      .def_readonly("K", &FilterBank::K)
      .def_readonly("variant", &FilterBank::variant)
      .def_readonly("sigma", &FilterBank::sigma)
      .def_readonly("phi", &FilterBank::phi)
      .def_readonly("scaled_phi", &FilterBank::scaled_phi)
      .def("max_residual", &FilterBank::max_residual)
      .def("max_off_orthogonality", &FilterBank::max_off_orthogonality);

  m.def("hankel_entry", &hankel_entry, py::arg("i"), py::arg("j"), py::arg("variant") = HankelVariant::Primary);
  m.def("hankel_matrix", &hankel_matrix, py::arg("L"), py::arg("variant") = HankelVariant::Primary);
  m.def("hankel_matvec", &hankel_matvec, py::arg("L"), py::arg("variant"), py::arg("v"));
  m.def("hankel_spectrum", &hankel_spectrum, py::arg("L"), py::arg("variant") = HankelVariant::Primary);
  m.def(
      "compute_filterbank",
      [](Eigen::Index L, Eigen::Index K, HankelVariant v) {
        return std::make_shared<FilterBank>(compute_filterbank(L, K, v));
      },
      py::arg("L"), py::arg("K"), py::arg("variant") = HankelVariant::Primary);
  m.def(
      "cached_filterbank",
      [](Eigen::Index L, Eigen::Index K, HankelVariant v, const std::filesystem::path& root) {
        return std::make_shared<FilterBank>(cached_filterbank(L, K, v, root));
      },
      py::arg("L"), py::arg("K"), py::arg("variant"), py::arg("cache_root"));
  m.def(
      "mu_vector", [](double a, Eigen::Index L, HankelVariant v) { return mu_vector(a, L, v).values; },
      py::arg("alpha"), py::arg("L"), py::arg("variant") = HankelVariant::Primary);
  m.def("projection_residual", &projection_residual, py::arg("bank"), py::arg("alpha"));
  m.def("spectral_decay_bound", &spectral_decay_bound, py::arg("j"), py::arg("L"));

  // lds
  py::class_<LdsParams>(m, "LdsParams")
      .def_static("diagonal", &LdsParams::diagonal, py::arg("a"), py::arg("B"), py::arg("C"), py::arg("D"))
      .def_static("dense", &LdsParams::dense, py::arg("A"), py::arg("B"), py::arg("C"), py::arg("D"))
      .def_property_readonly("A", &LdsParams::A)
      .def_readonly("B", &LdsParams::B)
      .def_readonly("C", &LdsParams::C)
      .def_readonly("D", &LdsParams::D)
      .def_property_readonly("hidden_dim", &LdsParams::hidden_dim)
      .def_property_readonly("input_dim", &LdsParams::input_dim)
      .def_property_readonly("output_dim", &LdsParams::output_dim)
      .def("spectral_radius", &LdsParams::spectral_radius)
      .def("to_json", [](const LdsParams& p) { return lds_to_json(p); })
      .def_static("from_json", &lds_from_json);

  m.def(
      "simulate_lds",
      [](const LdsParams& p, std::vector<Matrix> inputs, std::optional<Vector> x0) {
        return from_batch(simulate_lds(p, to_batch(std::move(inputs)), x0));
      },
      py::arg("lds"), py::arg("inputs"), py::arg("x0") = std::nullopt);
  m.def("random_symmetric_system", &random_symmetric_system, py::arg("d_h"), py::arg("d_in"), py::arg("d_out"),
        py::arg("radius"), py::arg("seed"), py::arg("scale") = 1.0);
  m.def("random_marginal_system", &random_marginal_system, py::arg("d_h"), py::arg("d_in"), py::arg("d_out"),
        py::arg("rho"), py::arg("seed"));
  m.def("markov_params", &markov_params, py::arg("lds"), py::arg("horizon"));
  m.def("apply_markov", &apply_markov, py::arg("markov"), py::arg("inputs"));
  m.def(
      "gaussian_inputs",
      [](std::size_t batch, Eigen::Index L, Eigen::Index d, std::uint64_t seed) {
        return from_batch(gaussian_inputs(batch, L, d, seed));
      },
      py::arg("batch"), py::arg("length"), py::arg("channels"), py::arg("seed"));
  m.def("fixture_system", &sec31_fixture);

  // stu
  py::class_<StuParams>(m, "StuParams")
      .def_static("zeros", &StuParams::zeros, py::arg("variant"), py::arg("K"), py::arg("d_in"), py::arg("d_out"),
                  py::arg("k_y") = 0)
      .def_readonly("K", &StuParams::K)
      .def_readonly("d_in", &StuParams::d_in)
      .def_readonly("d_out", &StuParams::d_out)
      .def_readwrite("M_u", &StuParams::M_u)
      .def_readwrite("M_phi_plus", &StuParams::M_phi_plus)
      .def_readwrite("M_phi_minus", &StuParams::M_phi_minus)
      .def_readwrite("M_y", &StuParams::M_y)
      .def("pack", &StuParams::pack)
      .def("unpack", &StuParams::unpack);

  m.def(
      "featurize",
      [](const FilterBank& bank, std::vector<Matrix> inputs, bool scaled) {
        py::list out;
        for (auto& f : featurize(bank, to_batch(std::move(inputs)), scaled ? FeatureScaling::Scaled : FeatureScaling::Raw))
          out.append(py::make_tuple(f.plus, f.minus));
        return out;
      },
      py::arg("bank"), py::arg("inputs"), py::arg("scaled") = false);
  m.def(
      "naive_featurize",
      [](const FilterBank& bank, std::vector<Matrix> inputs, bool scaled) {
        py::list out;
        for (auto& f :
             naive_featurize(bank, to_batch(std::move(inputs)), scaled ? FeatureScaling::Scaled : FeatureScaling::Raw))
          out.append(py::make_tuple(f.plus, f.minus));
        return out;
      },
      py::arg("bank"), py::arg("inputs"), py::arg("scaled") = false);
  m.def(
      "stu_forward",
      [](const StuParams& p, const FilterBank& bank, std::vector<Matrix> inputs) {
        SequenceBatch in = to_batch(std::move(inputs));
        if (p.variant == HankelVariant::Alternative) return from_batch(alt_stu_forward(p, bank, in));
        return from_batch(p.autoregressive() ? ar_stu_forward(p, bank, in) : stu_forward(p, bank, in));
      },
      py::arg("params"), py::arg("bank"), py::arg("inputs"));

  // theory
  m.def("stu_from_lds", &stu_from_lds, py::arg("lds"), py::arg("bank"), py::arg("K"));
  m.def("alt_stu_from_lds", &alt_stu_from_lds, py::arg("lds"), py::arg("bank"), py::arg("K"));
  m.def(
      "theorem_bound",
      [](Eigen::Index K, Eigen::Index L, double a, double b_col, double c_col, HankelVariant v) {
        TheoremBoundInputs in;
        in.K = K;
        in.L = L;
        in.a = a;
        in.b_col = b_col;
        in.c_col = c_col;
        in.c_const = theorem_constant(v);
        return theorem_bound(in);
      },
      py::arg("K"), py::arg("L"), py::arg("a") = 1.0, py::arg("b_col") = 1.0, py::arg("c_col") = 1.0,
      py::arg("variant") = HankelVariant::Primary);
  m.def(
      "approximation_report",
      [](const LdsParams& lds, const StuParams& stu, const FilterBank& bank, std::vector<Matrix> inputs) {
        const ApproximationReport r = approximation_report(lds, stu, bank, to_batch(std::move(inputs)));
        py::dict d;
        d["max_err"] = r.max_err;
        d["per_t_err"] = r.per_t_err;
        d["bound"] = r.bound;
        d["satisfied"] = r.satisfied;
        return d;
      },
      py::arg("lds"), py::arg("stu"), py::arg("bank"), py::arg("inputs"));
  m.def(
      "bounded_inputs",
      [](std::size_t batch, Eigen::Index L, Eigen::Index d, std::uint64_t seed) {
        return from_batch(bounded_inputs(batch, L, d, seed));
      },
      py::arg("batch"), py::arg("length"), py::arg("channels"), py::arg("seed"));
  m.def("characteristic_polynomial", &characteristic_polynomial, py::arg("lds"));
  m.def(
      "ar_coefficients",
      [](const LdsParams& lds) {
        const ArRepresentation ar = ar_coefficients(lds);
        return py::make_tuple(ar.alpha, ar.gamma);
      },
      py::arg("lds"));
  m.def(
      "ar_simulate",
      [](const Vector& alpha, std::vector<Matrix> gamma, const Matrix& inputs) {
        return ar_simulate(ArRepresentation{alpha, std::move(gamma)}, inputs);
      },
      py::arg("alpha"), py::arg("gamma"), py::arg("inputs"));

  // trainer
  m.def(
      "fit_stu_least_squares",
      [](std::vector<Matrix> inputs, std::vector<Matrix> targets, const FilterBank& bank, Eigen::Index K) {
        const LeastSquaresFit fit = fit_stu_least_squares(to_dataset(std::move(inputs), std::move(targets)), bank, K);
        return py::make_tuple(fit.params, fit.residual);
      },
      py::arg("inputs"), py::arg("targets"), py::arg("bank"), py::arg("K"));
  m.def(
      "fit_stu",
      [](std::vector<Matrix> inputs, std::vector<Matrix> targets, const FilterBank& bank, Eigen::Index K,
         Eigen::Index k_y, double lr, std::size_t steps, std::size_t batch, std::uint64_t seed,
         const std::string& schedule) {
        const SequenceDataset data = to_dataset(std::move(inputs), std::move(targets));
        py::gil_scoped_release release;
        const TrainReport r = fit_stu(data, bank, K, k_y, train_config(lr, steps, batch, seed, schedule));
        py::gil_scoped_acquire acquire;
        return report_dict(r);
      },
      py::arg("inputs"), py::arg("targets"), py::arg("bank"), py::arg("K"), py::arg("k_y") = 0,
      py::arg("lr") = 1e-2, py::arg("steps") = 2000, py::arg("batch") = 1, py::arg("seed") = 0,
      py::arg("schedule") = "warmup_cosine");
  m.def(
      "fit_lru",
      [](std::vector<Matrix> inputs, std::vector<Matrix> targets, Eigen::Index d_hidden, bool interventions, double lr,
         std::size_t steps, std::size_t batch, std::uint64_t seed, const std::string& schedule) {
        const SequenceDataset data = to_dataset(std::move(inputs), std::move(targets));
        py::gil_scoped_release release;
        const TrainReport r = fit_lru(data, d_hidden, train_config(lr, steps, batch, seed, schedule),
                                      interventions ? LruOptions{} : LruOptions::none());
        py::gil_scoped_acquire acquire;
        return report_dict(r);
      },
      py::arg("inputs"), py::arg("targets"), py::arg("d_hidden") = 16, py::arg("interventions") = true,
      py::arg("lr") = 1e-2, py::arg("steps") = 4000, py::arg("batch") = 1, py::arg("seed") = 0,
      py::arg("schedule") = "warmup_cosine");

  // stack
  m.def(
      "train_stack",
      [](const std::string& task, std::size_t n_train, std::size_t n_test, Eigen::Index length, Eigen::Index delay,
         Eigen::Index n_layers, Eigen::Index d_model, Eigen::Index K, const std::string& pooling, double lr,
         std::size_t steps, std::size_t batch, std::uint64_t seed, const std::string& schedule) {
        TaskConfig t;
        t.task = parse_task(task);
        t.n_train = n_train;
        t.n_test = n_test;
        t.length = length;
        t.delay = delay;
        t.seed = seed;
        StackConfig c;
        c.n_layers = n_layers;
        c.d_model = d_model;
        c.K = K;
        c.pooling = parse_pooling(pooling);
        const TrainConfig tc = train_config(lr, steps, batch, seed, schedule);
        py::gil_scoped_release release;
        const StackTrainResult r = train_stack(t, c, tc);
        py::gil_scoped_acquire acquire;
        py::dict d = report_dict(r.report);
        d["train_accuracy"] = r.train_accuracy;
        d["test_accuracy"] = r.test_accuracy;
        return d;
      },
      py::arg("task") = "delayed_recall", py::arg("n_train") = 256, py::arg("n_test") = 256,
      py::arg("length") = 256, py::arg("delay") = 128, py::arg("n_layers") = 2, py::arg("d_model") = 32,
      py::arg("K") = 16, py::arg("pooling") = "mean", py::arg("lr") = 3e-3, py::arg("steps") = 800,
      py::arg("batch") = 16, py::arg("seed") = 0, py::arg("schedule") = "warmup_cosine");

  m.attr("__version__") = SSSM_VERSION;
}
