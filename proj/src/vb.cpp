#include "epinf/vb.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "epinf/lbfgs.hpp"

namespace epinf {

namespace {

double median_of(Vec v) {
  std::sort(v.data(), v.data() + v.size());
  const Eigen::Index n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

VbResult vb_solve(const ModelSpec& model_in, const SolverConfig& config) {
  config.validate();
  ModelSpec model = model_in;
  model.validate();
  const Eigen::Index q = model.q();
  Vec tau(q);
  for (Eigen::Index i = 0; i < q; ++i) {
    if (model.sites[size_t(i)].kind != SitePotential::Kind::Laplace)
      throw std::invalid_argument("vb_solve: all sites must be Laplace");
    tau[i] = model.sites[size_t(i)].tau;
  }
  const double inv_nv = 1.0 / model.noise_var;

  VbResult res;
  SiteParams th;
  th.pi = tau.cwiseProduct(tau);  // same starting point as the EP solvers
  th.b = Vec::Zero(q);

  const auto t0 = std::chrono::steady_clock::now();
  double phi_prev = std::numeric_limits<double>::infinity();
  Vec u = Vec::Zero(model.n());

  for (int iter = 1; iter <= config.max_outer; ++iter) {
    GaussState gauss = build_gauss_state(model, th);
    ++res.n_var_comp;
    const Vec z = gauss.z;
    const double gstar = gauss.gstar;

    // Inner loop: smooth convex PLS in u with pi eliminated.
    auto objective = [&](const Vec& uu, Vec& grad) -> double {
      const Vec xu = model.X->apply(uu);
      const Vec s = model.B->apply(uu);
      const Vec root = (z.array() + s.array().square()).sqrt().matrix();
      const double f =
          (model.y - xu).squaredNorm() * inv_nv + 2.0 * tau.dot(root);
      grad = 2.0 * inv_nv * model.X->apply_adjoint(xu - model.y) +
             2.0 * model.B->apply_adjoint(
                       tau.cwiseProduct(s).cwiseQuotient(root));
      return f;
    };
    LbfgsOptions lo;
    lo.grad_tol = config.pls.grad_tol;
    lo.max_iters = config.pls.max_iters;
    LbfgsResult lr =
        lbfgs_minimize(objective, u, lo, config.pls.precondition);
    if (lr.line_search_failed)
      throw std::runtime_error("vb_solve: inner line search failure");
    u = lr.x;
    const Vec s = model.B->apply(u);
    const Vec root = (z.array() + s.array().square()).sqrt().matrix();
    th.pi = tau.cwiseQuotient(root);

    // phi_vb in the decoupled form at (z, g*) of this outer point.
    const double h_pi = tau.cwiseProduct(tau).cwiseQuotient(th.pi).sum();
    const double phi = z.dot(th.pi) - gstar + quad_form_r(model, th, u) +
                       log_zq_constant(model) + h_pi;
    const double el =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    res.trace.push_back({iter, el, phi, res.n_var_comp, false});

    if (std::isfinite(phi_prev) &&
        std::fabs(delta_metric(phi, phi_prev)) < config.tol_fixed_point) {
      phi_prev = phi;
      res.converged = true;
      break;
    }
    phi_prev = phi;
    if (config.max_seconds > 0.0 && el > config.max_seconds) break;
  }

  res.gauss = build_gauss_state(model, th);
  ++res.n_var_comp;
  res.state.pi = th.pi;
  res.state.z = res.gauss.z;
  res.state.u_star = res.gauss.u_star;
  const double h_pi = tau.cwiseProduct(tau).cwiseQuotient(th.pi).sum();
  res.state.phi_vb = res.gauss.z.dot(th.pi) - res.gauss.gstar +
                     quad_form_r(model, th, res.gauss.u_star) +
                     log_zq_constant(model) + h_pi;
  return res;
}

EpVbReport compare_ep_vb(const ModelSpec& model, const SolverResult& ep,
                         const VbResult& vb) {
  EpVbReport r;
  r.u_mean_ep = ep.gauss.u_star;
  r.u_var_ep = ep.gauss.diag_ainv;
  r.u_mean_vb = vb.gauss.u_star;
  r.u_var_vb = vb.gauss.diag_ainv;
  r.s_mean_ep = ep.gauss.s_star(model);
  r.s_var_ep = ep.gauss.z;
  r.s_mean_vb = vb.gauss.s_star(model);
  r.s_var_vb = vb.gauss.z;
  r.pi_ep = ep.th.pi;
  r.b_ep = ep.th.b;
  r.pi_vb = vb.state.pi;
  r.b_vb = Vec::Zero(vb.state.pi.size());
  r.frac_pi_vb_above_10 =
      double((r.pi_vb.array() > 10.0).count()) / double(r.pi_vb.size());
  r.min_pi_vb = r.pi_vb.minCoeff();
  r.max_abs_b_ep = r.b_ep.cwiseAbs().maxCoeff();
  r.median_u_var_ep = median_of(r.u_var_ep);
  r.median_u_var_vb = median_of(r.u_var_vb);
  r.mean_var_ratio_vb_over_ep =
      (r.u_var_vb.array() / r.u_var_ep.array()).mean();
  return r;
}

std::string format_report(const EpVbReport& r) {
  std::ostringstream os;
  os.precision(12);
  os << "sites=" << r.pi_ep.size() << "\n"
     << "frac_pi_vb_above_10=" << r.frac_pi_vb_above_10 << "\n"
     << "min_pi_vb=" << r.min_pi_vb << "\n"
     << "max_abs_b_ep=" << r.max_abs_b_ep << "\n"
     << "max_abs_b_vb=" << r.b_vb.cwiseAbs().maxCoeff() << "\n"
     << "median_u_var_ep=" << r.median_u_var_ep << "\n"
     << "median_u_var_vb=" << r.median_u_var_vb << "\n"
     << "mean_var_ratio_vb_over_ep=" << r.mean_var_ratio_vb_over_ep << "\n";
  return os.str();
}

}  // namespace epinf
