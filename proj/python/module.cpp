// Python bindings for the core operations: operators, tilted moments, the
// Gaussian backend, energies, and the four solvers.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "epinf/energy.hpp"
#include "epinf/harness.hpp"
#include "epinf/model.hpp"
#include "epinf/pls.hpp"
#include "epinf/solvers.hpp"
#include "epinf/tilted.hpp"
#include "epinf/vb.hpp"

namespace py = pybind11;
using namespace epinf;

namespace {

SolverKind solver_kind_of(const std::string& s) {
  if (s == "sequential") return SolverKind::Sequential;
  if (s == "parallel") return SolverKind::Parallel;
  if (s == "fast") return SolverKind::Fast;
  if (s == "vb") return SolverKind::Vb;
  throw std::invalid_argument("unknown solver '" + s + "'");
}

struct OpHandle {
  LinOpPtr op;
};

SitePotential site_of(const std::string& kind, double a, double b) {
  if (kind == "flat") return SitePotential::flat();
  if (kind == "laplace") return SitePotential::laplace(a);
  if (kind == "gaussian") return SitePotential::gaussian(a, b);
  throw std::invalid_argument("unknown site kind '" + kind + "'");
}

}  // namespace

PYBIND11_MODULE(epinf, m) {
  m.doc() = "expectation propagation for linear-Gaussian models with "
            "non-Gaussian potentials";

  py::class_<OpHandle>(m, "LinOp")
      .def_property_readonly("rows",
                             [](const OpHandle& h) { return h.op->rows(); })
      .def_property_readonly("cols",
                             [](const OpHandle& h) { return h.op->cols(); })
      .def("apply",
           [](const OpHandle& h, const Vec& v) { return h.op->apply(v); })
      .def("apply_adjoint",
           [](const OpHandle& h, const Vec& v) {
             return h.op->apply_adjoint(v);
           })
      .def("to_dense", [](const OpHandle& h) { return h.op->to_dense(); });

  m.def("dense_op", [](const Mat& mat) { return OpHandle{dense_op(mat)}; });
  m.def(
      "dft_blur_op",
      [](const Vec& spec, int h, int w) {
        return OpHandle{dft_blur_op(spec, h, w)};
      },
      py::arg("kernel_spectrum"), py::arg("h"), py::arg("w"));
  m.def("kernel_image_to_spectrum", &kernel_image_to_spectrum);
  m.def("subsampled_dft_op", [](int h, int w, const std::vector<int>& rows) {
    return OpHandle{subsampled_dft_op(h, w, rows)};
  });
  m.def("phase_encode_rows", &phase_encode_rows);
  m.def("diff_op", [](int h, int w) { return OpHandle{diff_op(h, w)}; });
  m.def("wavelet_op", [](int h, int w, int levels) {
    return OpHandle{wavelet_op(h, w, levels)};
  });
  m.def("stacked_op", [](const std::vector<OpHandle>& blocks) {
    std::vector<LinOpPtr> ops;
    for (const auto& b : blocks) ops.push_back(b.op);
    return OpHandle{stacked_op(std::move(ops))};
  });

  py::class_<SitePotential>(m, "SitePotential");
  m.def("site", &site_of, py::arg("kind"), py::arg("a") = 0.0,
        py::arg("b") = 1.0);

  py::class_<ModelSpec>(m, "ModelSpec")
      .def(py::init<>())
      .def_property(
          "X", [](const ModelSpec& mm) { return OpHandle{mm.X}; },
          [](ModelSpec& mm, const OpHandle& h) { mm.X = h.op; })
      .def_property(
          "B", [](const ModelSpec& mm) { return OpHandle{mm.B}; },
          [](ModelSpec& mm, const OpHandle& h) { mm.B = h.op; })
      .def_readwrite("y", &ModelSpec::y)
      .def_readwrite("noise_var", &ModelSpec::noise_var)
      .def_readwrite("sites", &ModelSpec::sites)
      .def_readwrite("eta", &ModelSpec::eta)
      .def("validate", &ModelSpec::validate);

  py::class_<TiltedMoments>(m, "TiltedMoments")
      .def_readonly("log_zhat", &TiltedMoments::log_zhat)
      .def_readonly("mean", &TiltedMoments::mean)
      .def_readonly("second_moment", &TiltedMoments::second_moment)
      .def("variance", &TiltedMoments::variance);
  m.def("tilted_moments", &tilted_moments, py::arg("pi_minus"),
        py::arg("b_minus"), py::arg("site"), py::arg("eta"));

  py::class_<GaussState>(m, "GaussState")
      .def_readonly("u_star", &GaussState::u_star)
      .def_readonly("z", &GaussState::z)
      .def_readonly("diag_ainv", &GaussState::diag_ainv)
      .def_readonly("logdet", &GaussState::logdet)
      .def_readonly("log_zq", &GaussState::log_zq)
      .def_readonly("gstar", &GaussState::gstar);
  m.def("build_gauss_state",
        [](const ModelSpec& model, const Vec& pi, const Vec& b) {
          return build_gauss_state(model, SiteParams{pi, b});
        });

  m.def("delta_metric", &delta_metric);
  m.def("phi_total", [](const ModelSpec& model, const Vec& pi, const Vec& b,
                        const Vec& pi_tilde, const Vec& b_tilde) {
    SiteParams th{pi, b};
    TildeParams tt{pi_tilde, b_tilde};
    GaussState g = build_gauss_state(model, th);
    return phi_total(th, tt, model, g).phi;
  });

  py::class_<TraceRow>(m, "TraceRow")
      .def_readonly("outer", &TraceRow::outer)
      .def_readonly("time_sec", &TraceRow::time_sec)
      .def_readonly("phi", &TraceRow::phi)
      .def_readonly("n_var_comp", &TraceRow::n_var_comp)
      .def_readonly("fallback", &TraceRow::fallback);

  py::class_<SolverResult>(m, "SolverResult")
      .def_property_readonly("pi",
                             [](const SolverResult& r) { return r.th.pi; })
      .def_property_readonly("b", [](const SolverResult& r) { return r.th.b; })
      .def_property_readonly("u_star",
                             [](const SolverResult& r) { return r.gauss.u_star; })
      .def_property_readonly("z", [](const SolverResult& r) { return r.gauss.z; })
      .def_property_readonly(
          "u_var", [](const SolverResult& r) { return r.gauss.diag_ainv; })
      .def_readonly("trace", &SolverResult::trace)
      .def_readonly("phi_star", &SolverResult::phi_star)
      .def_readonly("residual", &SolverResult::residual)
      .def_readonly("n_var_comp", &SolverResult::n_var_comp)
      .def_readonly("converged", &SolverResult::converged)
      .def_readonly("diverged", &SolverResult::diverged)
      .def_readonly("fallback_used", &SolverResult::fallback_used);

  m.def(
      "run_solver",
      [](const ModelSpec& model, const std::string& solver, double eta,
         double epsilon, double damping, int max_outer, double tol,
         double max_seconds) {
        SolverConfig cfg;
        cfg.solver_kind = solver_kind_of(solver);
        cfg.eta = eta;
        cfg.epsilon = epsilon;
        cfg.damping = damping;
        cfg.max_outer = max_outer;
        cfg.tol_fixed_point = tol;
        cfg.max_seconds = max_seconds;
        return run_solver(model, cfg);
      },
      py::arg("model"), py::arg("solver") = "fast", py::arg("eta") = 0.9,
      py::arg("epsilon") = 1e-5, py::arg("damping") = 0.9,
      py::arg("max_outer") = 200, py::arg("tol_fixed_point") = 1e-6,
      py::arg("max_seconds") = 0.0);

  py::class_<VbResult>(m, "VbResult")
      .def_property_readonly("pi",
                             [](const VbResult& r) { return r.state.pi; })
      .def_property_readonly("u_star",
                             [](const VbResult& r) { return r.state.u_star; })
      .def_property_readonly("z", [](const VbResult& r) { return r.state.z; })
      .def_property_readonly(
          "u_var", [](const VbResult& r) { return r.gauss.diag_ainv; })
      .def_property_readonly(
          "phi_vb", [](const VbResult& r) { return r.state.phi_vb; })
      .def_readonly("converged", &VbResult::converged);

  m.def(
      "vb_solve",
      [](const ModelSpec& model, int max_outer, double tol) {
        SolverConfig cfg;
        cfg.solver_kind = SolverKind::Vb;
        cfg.max_outer = max_outer;
        cfg.tol_fixed_point = tol;
        return vb_solve(model, cfg);
      },
      py::arg("model"), py::arg("max_outer") = 200,
      py::arg("tol_fixed_point") = 1e-6);

  m.def("ep_fixed_point_residual",
        [](const ModelSpec& model, const SolverResult& r) {
          return ep_fixed_point_residual(r.th, r.tt, model, r.gauss);
        });

  m.def("synthetic_image", &synthetic_image);
  m.def("build_model_from_config",
        [](const std::map<std::string, std::string>& kv) {
          return build_model(parse_config_map(kv));
        });
  m.def("run_experiment_from_config",
        [](const std::map<std::string, std::string>& kv) {
          return run_experiment(parse_config_map(kv));
        });
}
