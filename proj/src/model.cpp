#include "epinf/model.hpp"

#include <cmath>
#include <stdexcept>

namespace epinf {

SitePotential SitePotential::laplace(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("laplace: tau must be > 0");
  SitePotential s;
  s.kind = Kind::Laplace;
  s.tau = tau;
  return s;
}

SitePotential SitePotential::gaussian(double mean, double var) {
  if (!(var > 0.0)) throw std::invalid_argument("gaussian: var must be > 0");
  SitePotential s;
  s.kind = Kind::Gaussian;
  s.mean = mean;
  s.var = var;
  return s;
}

void ModelSpec::validate() const {
  if (!X || !B) throw std::invalid_argument("ModelSpec: missing operator");
  if (X->cols() != B->cols())
    throw std::invalid_argument("ModelSpec: X and B disagree on n");
  if (y.size() != X->rows())
    throw std::invalid_argument("ModelSpec: y length != X rows");
  if (!(noise_var > 0.0))
    throw std::invalid_argument("ModelSpec: noise_var must be > 0");
  if (Eigen::Index(sites.size()) != B->rows())
    throw std::invalid_argument("ModelSpec: sites length != B rows");
  if (!(eta > 0.0 && eta <= 1.0))
    throw std::invalid_argument("ModelSpec: eta must be in (0,1]");
}

TildeParams moments_to_natural(const Vec& mu, const Vec& rho) {
  if (mu.size() != rho.size())
    throw std::invalid_argument("moments_to_natural: length mismatch");
  if ((rho.array() <= 0.0).any())
    throw std::invalid_argument("moments_to_natural: rho must be > 0");
  TildeParams tt;
  tt.pi_tilde = rho.cwiseInverse();
  tt.b_tilde = mu.cwiseQuotient(rho);
  return tt;
}

void natural_to_moments(const TildeParams& tt, Vec& mu, Vec& rho) {
  if ((tt.pi_tilde.array() <= 0.0).any())
    throw std::invalid_argument("natural_to_moments: pi_tilde must be > 0");
  rho = tt.pi_tilde.cwiseInverse();
  mu = tt.b_tilde.cwiseProduct(rho);
}

CavityParams cavity(const TildeParams& tt, const SiteParams& th, double eta) {
  return {tt.pi_tilde - eta * th.pi, tt.b_tilde - eta * th.b};
}

bool cavity_valid(double pi_minus, double pi_tilde) {
  return pi_minus > kCavityFloor * pi_tilde;
}

double log_partition_gauss1d(double pi_tilde, double b_tilde) {
  if (!(pi_tilde > 0.0))
    throw std::invalid_argument("log_partition_gauss1d: pi_tilde must be > 0");
  return 0.5 * std::log(2.0 * M_PI / pi_tilde) +
         b_tilde * b_tilde / (2.0 * pi_tilde);
}

}  // namespace epinf
