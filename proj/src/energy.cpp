#include "epinf/energy.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Cholesky>

namespace epinf {

double delta_metric(double a, double b) {
  double m = std::max(std::fabs(a), std::fabs(b));
  if (m < 1e-9) m = 1e-9;
  return (b - a) / m;
}

double phi_cup(const TildeParams& tt, double eta) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < tt.pi_tilde.size(); ++i)
    s += log_partition_gauss1d(tt.pi_tilde[i], tt.b_tilde[i]);
  return (2.0 / eta) * s;
}

double phi_cap_coupled(const SiteParams& th, const TildeParams& tt,
                       const ModelSpec& model, const GaussState& gauss) {
  const double eta = model.eta;
  const CavityParams cav = cavity(tt, th, eta);
  for (Eigen::Index i = 0; i < cav.pi_minus.size(); ++i)
    if (!cavity_valid(cav.pi_minus[i], tt.pi_tilde[i]))
      throw std::runtime_error("phi_cap_coupled: invalid cavity at site " +
                               std::to_string(i));
  const auto tm = tilted_moments_batch(cav, model.sites, eta);
  double sum_log_zhat = 0.0;
  for (const auto& t : tm) sum_log_zhat += t.log_zhat;
  return -(2.0 / eta) * sum_log_zhat - 2.0 * gauss.log_zq;
}

EnergyBreakdown phi_total(const SiteParams& th, const TildeParams& tt,
                          const ModelSpec& model, const GaussState& gauss) {
  EnergyBreakdown e;
  e.minus2_log_zq = -2.0 * gauss.log_zq;
  const double cap = phi_cap_coupled(th, tt, model, gauss);
  e.site_sum = (cap - e.minus2_log_zq) + phi_cup(tt, model.eta);
  e.coupling = 0.0;
  e.phi = e.minus2_log_zq + e.site_sum;
  return e;
}

double psi_site(double s, double pi_i, double b_i, double z_i,
                double pi_tilde_i, double b_tilde_i, const SitePotential& site,
                double eta) {
  const double pm = pi_tilde_i - eta * pi_i;
  const double bm = b_tilde_i - eta * b_i;
  if (!cavity_valid(pm, pi_tilde_i))
    throw std::runtime_error("psi_site: invalid cavity");
  const auto tm = tilted_moments(pm, bm, site, eta);
  return -(z_i + s * s) * pi_i + 2.0 * b_i * s + (2.0 / eta) * tm.log_zhat;
}

double phi_decoupled(const SiteParams& th, const Vec& z, double gstar,
                     const TildeParams& tt, const ModelSpec& model) {
  if ((z.array() <= 0.0).any())
    throw std::invalid_argument("phi_decoupled: z must be > 0");
  // min_u R(pi, b, u) via one dense solve.
  const GaussFactor f = build_precision(model, th);
  const Vec u = posterior_mean(model, th, f);
  const double r_min = quad_form_r(model, th, u);

  const double eta = model.eta;
  const CavityParams cav = cavity(tt, th, eta);
  const auto tm = tilted_moments_batch(cav, model.sites, eta);
  double sum_log_zhat = 0.0;
  for (const auto& t : tm) sum_log_zhat += t.log_zhat;

  return z.dot(th.pi) - gstar + r_min + log_zq_constant(model) -
         (2.0 / eta) * sum_log_zhat + phi_cup(tt, eta);
}

double phi_decoupled_from_pls(double f_min, double gstar,
                              const TildeParams& tt, const ModelSpec& model) {
  return f_min - gstar + log_zq_constant(model) + phi_cup(tt, model.eta);
}

}  // namespace epinf
