#pragma once

// Variational bounding baseline for Laplace potentials, solved by the
// classic double loop: outer updates of z = Var_Q[s|y] (with g* refresh),
// inner penalized least squares with pi eliminated analytically through
// h_i(pi) = tau_i^2 / pi, so the inner objective is
//   |y - Xu|^2 / noise_var + 2 sum_i tau_i sqrt(z_i + s_i^2).
// b is fixed to zero (even potentials).

#include "epinf/solvers.hpp"

namespace epinf {

struct VbState {
  Vec pi;
  Vec z;
  Vec u_star;
  double phi_vb = 0.0;  // z'pi - g*(z) + R(pi, 0, u*) + const + h(pi)
};

struct VbResult {
  VbState state;
  GaussState gauss;
  SolverTrace trace;
  long n_var_comp = 0;
  bool converged = false;
};

VbResult vb_solve(const ModelSpec& model, const SolverConfig& config);

// Aligned marginal/parameter dump plus the summary statistics used by the
// EP-vs-VB comparison.
struct EpVbReport {
  Vec u_mean_ep, u_var_ep, u_mean_vb, u_var_vb;
  Vec s_mean_ep, s_var_ep, s_mean_vb, s_var_vb;
  Vec pi_ep, b_ep, pi_vb, b_vb;
  double frac_pi_vb_above_10 = 0.0;
  double min_pi_vb = 0.0;
  double max_abs_b_ep = 0.0;
  double median_u_var_ep = 0.0;
  double median_u_var_vb = 0.0;
  double mean_var_ratio_vb_over_ep = 0.0;
};

EpVbReport compare_ep_vb(const ModelSpec& model, const SolverResult& ep,
                         const VbResult& vb);

std::string format_report(const EpVbReport& r);

}  // namespace epinf
