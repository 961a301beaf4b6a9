#include <sstream>
#include <string>

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "wpl/dataset.hpp"
#include "wpl/error.hpp"
#include "wpl/experiment.hpp"
#include "wpl/laplace.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

py::array_t<double> to_array(const wpl::Tensor& t) {
  py::array_t<double> out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict split_dict(const wpl::data::Split& s) {
  py::dict d;
  d["x"] = to_array(s.x);
  d["y"] = py::array_t<int>(static_cast<py::ssize_t>(s.y.size()), s.y.data());
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of wpl_lab";

  // Later registrations take precedence, so the base class goes first.
  py::register_exception<wpl::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<wpl::ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "normalize_config",
      [](const std::string& text) { return wpl::cli::to_json(wpl::cli::parse_config(json::parse(text))).dump(); },
      py::arg("config_json"), "Parses a JSON config and returns it with every default filled in.");

  m.def(
      "run",
      [](const std::string& text) {
        const auto cfg = wpl::cli::parse_config(json::parse(text));
        std::ostringstream log;
        int status = 0;
        {
          py::gil_scoped_release release;
          status = wpl::cli::run(cfg, log);
        }
        return py::make_tuple(status, log.str());
      },
      py::arg("config_json"), "Runs a configured command; returns (exit_status, log).");

  m.def(
      "verify_laplace",
      [](std::uint64_t seed, int quadratic_models, int thetas_per_model, int identity_cases) {
        wpl::cli::LaplaceSuite suite;
        suite.quadratic_models = quadratic_models;
        suite.thetas_per_model = thetas_per_model;
        suite.quadratic_identity_cases = identity_cases;
        wpl::cli::LaplaceReport report;
        {
          py::gil_scoped_release release;
          report = wpl::cli::verify_laplace(suite, seed);
        }
        return report.to_json().dump();
      },
      py::arg("seed") = 0, py::arg("quadratic_models") = 24, py::arg("thetas_per_model") = 5,
      py::arg("identity_cases") = 100);

  m.def(
      "make_synthetic",
      [](const std::string& kind, int classes, int per_class, int val_per_class, double noise, std::uint64_t seed) {
        wpl::data::SyntheticSpec spec;
        spec.kind = wpl::data::kind_from_name(kind);
        spec.classes = classes;
        spec.per_class = per_class;
        spec.val_per_class = val_per_class;
        spec.noise = noise;
        const auto ds = wpl::data::make_synthetic(spec, seed);
        py::dict d;
        d["train"] = split_dict(ds.train);
        d["validation"] = split_dict(ds.validation);
        d["num_classes"] = ds.num_classes;
        return d;
      },
      py::arg("kind") = "arcs", py::arg("classes") = 4, py::arg("per_class") = 500, py::arg("val_per_class") = 125,
      py::arg("noise") = 0.3, py::arg("seed") = 0);

  m.def(
      "schur_omega",
      [](const wpl::laplace::Matrix& h, int p1) {
        return wpl::laplace::schur_omega(wpl::laplace::BlockHessian::partition(h, p1));
      },
      py::arg("hessian"), py::arg("p1"), "Hss - Hs1 H11^-1 H1s for a Hessian whose first p1 rows are theta_1.");

  m.def(
      "closed_form_log_a",
      [](const wpl::laplace::Matrix& q, const wpl::laplace::Vector& mean, double offset, double sigma2, int p1,
         const wpl::laplace::Vector& theta_s) {
        const auto model = wpl::laplace::make_quadratic_model(q, mean, offset, sigma2, p1);
        const auto blocks = wpl::laplace::BlockHessian::partition(wpl::laplace::negative_hessian_lp(model), p1);
        return wpl::laplace::closed_form_log_a(model, blocks, theta_s);
      },
      py::arg("q"), py::arg("mean"), py::arg("offset"), py::arg("sigma2"), py::arg("p1"), py::arg("theta_s"),
      "Log of the theta_1 marginal for a quadratic log-likelihood with a Gaussian prior.");

  m.def("median", &wpl::cli::median, py::arg("values"));
}
