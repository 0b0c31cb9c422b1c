#pragma once

// The penalized least squares building block (u*, theta) <- PLS(z, theta~)
// and the updateTTil subalgorithm. PLS minimizes
//   f(u) = |y - Xu|^2 / noise_var - sum_i psi_i(s_i),
//   psi_i(s) = min over (pi_i >= 0, b_i) of psi_i(s, pi_i, b_i),
// which is convex; each psi_i evaluation is a bivariate convex minimization
// solved by two EP-style moment-matching updates followed by damped Newton.

#include <optional>

#include "epinf/energy.hpp"
#include "epinf/lbfgs.hpp"
#include "epinf/model.hpp"

namespace epinf {

struct PlsOptions {
  double grad_tol = 1e-7;     // relative gradient tolerance for the outer QN
  int max_iters = 4000;
  double site_tol = 1e-10;    // moment residual tolerance of site profiles
  int max_newton = 50;
  double pi_max = 1e8;
  double tol_inner = 1e-8;    // relative phi(z, theta~) change in updateTTil
  // Optional extra stop condition for updateTTil: also require the relative
  // mu <- s* movement to fall below this (0 disables).
  double mu_tol = 0.0;
  int max_pls_calls = 50;
  Precond precondition;       // optional P^-1 apply for the outer QN
};

struct SiteProfileResult {
  double psi = 0.0;
  double pi = 0.0;
  double b = 0.0;
  double mean = 0.0;           // tilted mean at the minimizer
  double second_moment = 0.0;  // tilted second moment at the minimizer
  bool at_lower_bound = false;  // pi clamped at 0
  bool at_upper_bound = false;  // pi pinned at the cap
};

// Minimize psi_i(s, pi, b) subject to pi in [0, pi_max] and cavity validity.
// At interior minima the stationarity conditions are tilted mean = s and
// tilted second moment = z + s^2.
SiteProfileResult site_profile(double s, double z_i, double pi_tilde_i,
                               double b_tilde_i, const SitePotential& site,
                               double eta, double init_pi, double init_b,
                               const PlsOptions& opts = {});

struct PlsResult {
  Vec u_star;
  Vec s_star;
  SiteParams th;
  double objective = 0.0;  // f(u*) = |y-Xu*|^2/nv - sum psi_i
  int iterations = 0;
  bool converged = false;
};

struct PlsWarmStart {
  Vec u;
  SiteParams th;
};

PlsResult pls_solve(const Vec& z, const TildeParams& tt, const ModelSpec& model,
                    const std::optional<PlsWarmStart>& warm = std::nullopt,
                    const PlsOptions& opts = {});

struct UpdateTtilResult {
  TildeParams tt;
  SiteParams th;
  Vec u_star;
  double phi = 0.0;  // phi(z, theta~) at the returned theta~
  int pls_calls = 0;
  bool converged = false;
};

// Locally minimize phi(z, theta~) over theta~: set rho <- z, then alternate
// PLS with mu <- s* until the relative phi change drops below tol_inner.
// Nonincreasing in phi(z, theta~); an increase beyond 1e-9 relative is a
// hard error.
UpdateTtilResult update_ttil(const Vec& z, double gstar, const TildeParams& tt,
                             const ModelSpec& model,
                             const std::optional<PlsWarmStart>& warm =
                                 std::nullopt,
                             const PlsOptions& opts = {});

}  // namespace epinf
