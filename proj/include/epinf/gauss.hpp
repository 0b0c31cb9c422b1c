#pragma once

// Dense Gaussian backend: factorization of A = X'X/noise_var + B'diag(pi)B,
// posterior means, marginal variances, log|A|, log Z_Q and the Fenchel-dual
// bookkeeping for g*(z).
//
// log Z_Q convention, used consistently everywhere:
//   -2 log Z_Q = log|A| + R(pi,b,u*) + m log(2 pi noise_var) - n log(2 pi),
//   R(pi,b,u)  = |y - Xu|^2 / noise_var + s'diag(pi)s - 2 b's,  s = Bu.

#include <optional>

#include "epinf/model.hpp"

namespace epinf {

// Dense Cholesky factor of A, lower triangular.
struct GaussFactor {
  Mat L;
  Eigen::Index n() const { return L.rows(); }
};

GaussFactor build_precision(const ModelSpec& model, const SiteParams& th);

Vec posterior_mean(const ModelSpec& model, const SiteParams& th,
                   const GaussFactor& f);

// z_j = (B A^-1 B')_jj, via the explicit inverse and 2n MVMs with B.
Vec marginal_variances(const ModelSpec& model, const GaussFactor& f);

double log_det(const GaussFactor& f);

double log_zq(const ModelSpec& model, const SiteParams& th,
              const GaussFactor& f, const Vec& u_star);

// R(pi, b, u) as above.
double quad_form_r(const ModelSpec& model, const SiteParams& th, const Vec& u);

// Additive constant of -2 log Z_Q: m log(2 pi sigma^2) - n log(2 pi).
double log_zq_constant(const ModelSpec& model);

// One-stop posterior summary at a fixed theta.
struct GaussState {
  Mat chol;        // L with A = L L'
  Vec u_star;      // E_Q[u|y]
  Vec z;           // Var_Q[s|y]
  Vec diag_ainv;   // Var_Q[u|y] diagonal
  double logdet = 0.0;
  double log_zq = 0.0;
  double gstar = 0.0;  // g*(z) = z'pi - log|A|, tight at pi_at_z
  Vec pi_at_z;

  Vec s_star(const ModelSpec& model) const { return model.B->apply(u_star); }
};

// Maximum n accepted by the dense backend.
constexpr Eigen::Index kDenseSizeCap = 20000;

GaussState build_gauss_state(const ModelSpec& model, const SiteParams& th);

// (z, g*) of a state; the dual bound z'pi' - g*(z) >= log|A(pi')| is tight
// at pi' = pi_at_z because z = grad log|A| there.
std::pair<Vec, double> refresh_dual(const GaussState& state);

}  // namespace epinf
