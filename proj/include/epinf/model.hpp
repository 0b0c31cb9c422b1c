#pragma once

// Model container and the natural-parameter algebra connecting site
// parameters, marginal parameters, cavities and moment coordinates.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "epinf/linop.hpp"

namespace epinf {

struct SitePotential {
  enum class Kind { Flat, Laplace, Gaussian };
  Kind kind = Kind::Flat;
  double tau = 0.0;   // Laplace scale
  double mean = 0.0;  // Gaussian site mean
  double var = 1.0;   // Gaussian site variance

  static SitePotential flat() { return {}; }
  static SitePotential laplace(double tau);
  static SitePotential gaussian(double mean, double var);
};

// Observation model: y = X u + noise, prior potentials on s = B u.
struct ModelSpec {
  LinOpPtr X;
  LinOpPtr B;
  Vec y;
  double noise_var = 1.0;
  std::vector<SitePotential> sites;
  double eta = 1.0;

  Eigen::Index n() const { return X->cols(); }
  Eigen::Index m() const { return X->rows(); }
  Eigen::Index q() const { return B->rows(); }
  void validate() const;
};

// theta = (pi, b), pi >= 0 componentwise.
struct SiteParams {
  Vec pi;
  Vec b;
  static SiteParams zeros(Eigen::Index q) {
    return {Vec::Zero(q), Vec::Zero(q)};
  }
};

// theta~ = (pi~, b~), the natural coordinates of the marginal track;
// pi~ = 1/rho, b~ = mu/rho.
struct TildeParams {
  Vec pi_tilde;
  Vec b_tilde;

  Vec mu() const { return b_tilde.cwiseQuotient(pi_tilde); }
  Vec rho() const { return pi_tilde.cwiseInverse(); }
};

struct CavityParams {
  Vec pi_minus;
  Vec b_minus;
};

// Any cavity with pi_minus <= kCavityFloor * pi_tilde is rejected and left
// to the caller's damping.
constexpr double kCavityFloor = 1e-6;

TildeParams moments_to_natural(const Vec& mu, const Vec& rho);
void natural_to_moments(const TildeParams& tt, Vec& mu, Vec& rho);
CavityParams cavity(const TildeParams& tt, const SiteParams& th, double eta);
bool cavity_valid(double pi_minus, double pi_tilde);

// log integral of exp(b~ s - pi~ s^2 / 2): 0.5 log(2 pi / pi~) + b~^2/(2 pi~).
double log_partition_gauss1d(double pi_tilde, double b_tilde);

}  // namespace epinf
