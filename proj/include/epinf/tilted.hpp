#pragma once

// Moments and log partition function of the tilted marginal
//   P_i(s) ~ exp(b- s - pi- s^2/2) t_i(s)^eta,
// in closed form. Laplace sites are evaluated through erfcx in log space so
// no intermediate overflows or cancellations occur even deep in the tails.

#include <vector>

#include "epinf/model.hpp"

namespace epinf {

struct TiltedMoments {
  double log_zhat = 0.0;       // log of the tilted normalizer
  double mean = 0.0;           // E[s]
  double second_moment = 0.0;  // E[s^2]

  double variance() const { return second_moment - mean * mean; }
};

// pi_minus must be > 0. The fractional parameter enters a Laplace factor as
// tau -> eta*tau, exactly. Throws if the tilted variance collapses below
// 1e-12 of the cavity variance or any output is non-finite.
TiltedMoments tilted_moments(double pi_minus, double b_minus,
                             const SitePotential& site, double eta);

// Elementwise map; errors carry the offending site index.
std::vector<TiltedMoments> tilted_moments_batch(
    const CavityParams& cav, const std::vector<SitePotential>& sites,
    double eta);

}  // namespace epinf
