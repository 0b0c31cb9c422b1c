#pragma once

// Independent brute-force references used by tests and `ep selftest`:
// adaptive quadrature for tilted moments and tiny-model partition functions,
// finite differences, and the nested saddle-point optimizer for the duality
// checks. Lives in its own library target so the production library carries
// no quadrature code.

#include <functional>

#include "epinf/model.hpp"
#include "epinf/tilted.hpp"

namespace epinf {
namespace oracle {

// Adaptive Gauss-Kronrod moments of exp(b- s - pi- s^2/2) t(s)^eta on a
// cavity-centered interval +-40 standard deviations, split at the kink.
TiltedMoments quad_tilted(double pi_minus, double b_minus,
                          const SitePotential& site, double eta,
                          double rel_tol = 1e-10);

// Ground-truth log Z of the full model via tensor-product quadrature, n <= 3.
double quad_logz_model(const ModelSpec& model, double rel_tol = 1e-9);

// Central finite differences with step h*(1+|x_i|).
Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x,
                double h = 1e-6);

// Both orderings of the inner-loop saddle problem on a tiny instance:
//   maxmin = max_theta min_v phi_cap(v, theta)
//   minmax = min_v max_theta phi_cap(v, theta)
// computed with the oracle's own optimizers (quadrature site terms, dense
// log-det, Newton for g*). Throws if A is near-singular or an optimizer
// fails to reach its tolerance.
struct SaddleValues {
  double maxmin = 0.0;
  double minmax = 0.0;
};
SaddleValues saddle_brute(const ModelSpec& model, unsigned seed = 0,
                          int restarts = 3);

// g*(z) = inf_pi z'pi - log|A(pi)| by damped Newton (dense, tiny q), and the
// minimizing pi (= grad g*). Exposed for the bound tests.
double gstar_by_newton(const ModelSpec& model, const Vec& z, Vec* pi_hat);

// max_theta phi_cap(theta, theta~) of the coupled energy, by projected
// gradient ascent with quadrature site terms. The theta-independent phi_cup
// term is not included; add it for full-energy comparisons.
double max_theta_coupled(const ModelSpec& model, const TildeParams& tt,
                         unsigned seed, int restarts);

}  // namespace oracle
}  // namespace epinf
