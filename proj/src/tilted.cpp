#include "epinf/tilted.hpp"

#include <cmath>
#include <stdexcept>

#include "epinf/special.hpp"

namespace epinf {

namespace {

TiltedMoments gaussian_core(double p, double b) {
  // Moments of the (unnormalized) Gaussian exp(b s - p s^2 / 2).
  TiltedMoments m;
  m.log_zhat = 0.5 * std::log(2.0 * M_PI / p) + b * b / (2.0 * p);
  m.mean = b / p;
  m.second_moment = 1.0 / p + m.mean * m.mean;
  return m;
}

// Laplace tilt: split at 0 into two truncated Gaussians with linear
// coefficients a+ = b - tau', a- = -b - tau'. Each half-line integral is
//   I0(a) = sigma * sqrt(pi/2) * erfcx(alpha / sqrt 2),  alpha = -a / sqrt(p),
// and the mixture variance formula keeps everything nonnegative.
TiltedMoments laplace_core(double p, double b, double tau_eff) {
  const double sp = std::sqrt(p);
  const double sigma = 1.0 / sp;
  const double a_pos = b - tau_eff;
  const double a_neg = -b - tau_eff;
  const double alpha_pos = -a_pos / sp;
  const double alpha_neg = -a_neg / sp;

  const double log_i0_pos =
      std::log(sigma) + 0.5 * std::log(M_PI_2) + log_erfcx(alpha_pos * M_SQRT1_2);
  const double log_i0_neg =
      std::log(sigma) + 0.5 * std::log(M_PI_2) + log_erfcx(alpha_neg * M_SQRT1_2);

  TiltedMoments m;
  m.log_zhat = logaddexp(log_i0_pos, log_i0_neg);
  const double w_pos = std::exp(log_i0_pos - m.log_zhat);
  const double w_neg = std::exp(log_i0_neg - m.log_zhat);

  const auto t_pos = trunc_std_lower(alpha_pos);
  const auto t_neg = trunc_std_lower(alpha_neg);
  // Means of each half (the negative side is reflected).
  const double m_pos = a_pos / p + sigma * t_pos.mean;
  const double m_neg = a_neg / p + sigma * t_neg.mean;
  m.mean = w_pos * m_pos - w_neg * m_neg;
  const double var = w_pos * t_pos.var * sigma * sigma +
                     w_neg * t_neg.var * sigma * sigma +
                     w_pos * w_neg * (m_pos + m_neg) * (m_pos + m_neg);
  m.second_moment = var + m.mean * m.mean;
  return m;
}

}  // namespace

TiltedMoments tilted_moments(double pi_minus, double b_minus,
                             const SitePotential& site, double eta) {
  if (!(pi_minus > 0.0))
    throw std::invalid_argument("tilted_moments: cavity precision must be > 0");
  TiltedMoments m;
  switch (site.kind) {
    case SitePotential::Kind::Flat:
      m = gaussian_core(pi_minus, b_minus);
      break;
    case SitePotential::Kind::Laplace:
      m = laplace_core(pi_minus, b_minus, eta * site.tau);
      break;
    case SitePotential::Kind::Gaussian: {
      const double p = pi_minus + eta / site.var;
      const double b = b_minus + eta * site.mean / site.var;
      m = gaussian_core(p, b);
      m.log_zhat += -0.5 * eta * std::log(2.0 * M_PI * site.var) -
                    eta * site.mean * site.mean / (2.0 * site.var);
      break;
    }
  }
  if (!std::isfinite(m.log_zhat) || !std::isfinite(m.mean) ||
      !std::isfinite(m.second_moment))
    throw std::runtime_error("tilted_moments: non-finite result");
  const double cavity_var = 1.0 / pi_minus;
  if (!(m.variance() > 1e-12 * cavity_var))
    throw std::runtime_error("tilted_moments: tilted variance collapsed");
  return m;
}

std::vector<TiltedMoments> tilted_moments_batch(
    const CavityParams& cav, const std::vector<SitePotential>& sites,
    double eta) {
  if (cav.pi_minus.size() != Eigen::Index(sites.size()) ||
      cav.b_minus.size() != Eigen::Index(sites.size()))
    throw std::invalid_argument("tilted_moments_batch: length mismatch");
  std::vector<TiltedMoments> out(sites.size());
  for (size_t i = 0; i < sites.size(); ++i) {
    try {
      out[i] = tilted_moments(cav.pi_minus[i], cav.b_minus[i], sites[i], eta);
    } catch (const std::exception& e) {
      throw std::runtime_error("site " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace epinf
