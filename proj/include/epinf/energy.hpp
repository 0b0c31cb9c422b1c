#pragma once

// The EP energy pieces. All values share the log Z_Q constant convention of
// gauss.hpp, so energies are comparable across solvers within a run.
//
//   phi(theta, theta~) = phi_cap + phi_cup
//   phi_cap            = -(2/eta) sum_i log Zhat_i - 2 log Z_Q
//   phi_cup            = (2/eta) sum_i log Z_i(theta~_i)
//
// The decoupled form replaces log|A| inside -2 log Z_Q by its tight linear
// upper bound z'pi - g*(z), giving phi(theta, z, theta~) >= phi(theta, theta~)
// with equality when z are the marginal variances at pi and g* is fresh.

#include "epinf/gauss.hpp"
#include "epinf/model.hpp"
#include "epinf/tilted.hpp"

namespace epinf {

struct EnergyBreakdown {
  double phi = 0.0;
  double minus2_log_zq = 0.0;  // or its decoupled equivalent
  double site_sum = 0.0;       // -(2/eta) sum(log Zhat_i - log Z_i)
  double coupling = 0.0;       // z'pi - g*(z) when decoupled, else 0
};

// Alg. 1 relative change: (b - a) / max(|a|, |b|, 1e-9).
double delta_metric(double a, double b);

double phi_cup(const TildeParams& tt, double eta);

double phi_cap_coupled(const SiteParams& th, const TildeParams& tt,
                       const ModelSpec& model, const GaussState& gauss);

EnergyBreakdown phi_total(const SiteParams& th, const TildeParams& tt,
                          const ModelSpec& model, const GaussState& gauss);

// psi_i(s, pi_i, b_i) = -(z_i + s^2) pi_i + 2 b_i s + (2/eta) log Zhat_i,
// with the tilted normalizer at cavity theta~_i - eta*theta_i.
double psi_site(double s, double pi_i, double b_i, double z_i,
                double pi_tilde_i, double b_tilde_i, const SitePotential& site,
                double eta);

// Full decoupled energy phi(theta, z, theta~) with cached g*(z); the inner
// u* minimization is solved exactly by one linear solve.
double phi_decoupled(const SiteParams& th, const Vec& z, double gstar,
                     const TildeParams& tt, const ModelSpec& model);

// Same value when the PLS objective minimum f_min = min_u |y-Xu|^2/nv - sum
// psi_i is already known.
double phi_decoupled_from_pls(double f_min, double gstar,
                              const TildeParams& tt, const ModelSpec& model);

}  // namespace epinf
