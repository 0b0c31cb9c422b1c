#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "epinf/oracle.hpp"
#include "epinf/vb.hpp"

using namespace epinf;

namespace {

std::mt19937_64 rng(41);

Vec randn(Eigen::Index n) {
  std::normal_distribution<double> gn;
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = gn(rng);
  return v;
}

ModelSpec laplace_model(int n, int m, int q, double tau, double nv = 1.0) {
  ModelSpec model;
  Mat x(m, n), b(q, n);
  std::normal_distribution<double> gn;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) x(i, j) = gn(rng) / std::sqrt(double(n));
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < n; ++j) b(i, j) = gn(rng) / std::sqrt(double(n));
  model.X = dense_op(x);
  model.B = dense_op(b);
  model.y = randn(m);
  model.noise_var = nv;
  model.sites.assign(size_t(q), SitePotential::laplace(tau));
  model.eta = 1.0;
  return model;
}

}  // namespace

TEST_CASE("super-gaussian bound: min over pi of pi s^2 + tau^2/pi = 2 tau |s|") {
  std::uniform_real_distribution<double> un(0.1, 3.0);
  for (int t = 0; t < 50; ++t) {
    const double s = un(rng) - 1.5, tau = un(rng);
    double best = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 100000; ++i) {
      const double pi = 1e-3 * i;
      best = std::min(best, pi * s * s + tau * tau / pi);
    }
    CHECK(best == doctest::Approx(2.0 * tau * std::fabs(s)).epsilon(1e-4));
    // analytic minimizer tau/|s|
    if (std::fabs(s) > 1e-6) {
      const double pi_star = tau / std::fabs(s);
      CHECK(pi_star * s * s + tau * tau / pi_star ==
            doctest::Approx(2.0 * tau * std::fabs(s)).epsilon(1e-12));
    }
  }
}

TEST_CASE("vb with vanishing tau reduces to gaussian least squares") {
  ModelSpec model = laplace_model(4, 6, 5, 1e-7);
  SolverConfig cfg;
  auto res = vb_solve(model, cfg);
  REQUIRE(res.converged);
  Mat x = model.X->to_dense();
  Vec want = (x.transpose() * x).ldlt().solve(x.transpose() * model.y);
  CHECK((res.state.u_star - want).lpNorm<Eigen::Infinity>() <=
        1e-5 * (1.0 + want.lpNorm<Eigen::Infinity>()));
}

TEST_CASE("vb outer iterations are monotone and satisfy the bound") {
  ModelSpec model = laplace_model(1, 2, 2, 1.3, 0.8);
  SolverConfig cfg;
  cfg.tol_fixed_point = 1e-9;
  auto res = vb_solve(model, cfg);
  REQUIRE(res.converged);
  for (size_t i = 1; i < res.trace.size(); ++i)
    CHECK(res.trace[i].phi <=
          res.trace[i - 1].phi + 1e-9 * (1.0 + std::fabs(res.trace[i].phi)));

  // phi_vb >= -2 log Z with the exact constant convention
  const double logz = oracle::quad_logz_model(model, 1e-10);
  CHECK(res.state.phi_vb >= -2.0 * logz - 1e-8);
}

TEST_CASE("vb rejects non-laplace sites") {
  ModelSpec model = laplace_model(2, 3, 3, 1.0);
  model.sites[1] = SitePotential::flat();
  SolverConfig cfg;
  CHECK_THROWS(vb_solve(model, cfg));
}

TEST_CASE("ep-vs-vb report: gaussian limit gives identical marginals") {
  ModelSpec model = laplace_model(3, 5, 4, 1e-7);
  SolverConfig cfg;
  auto vb = vb_solve(model, cfg);

  ModelSpec flat = model;
  flat.sites.assign(4, SitePotential::flat());
  SolverConfig fcfg;
  fcfg.solver_kind = SolverKind::Fast;
  fcfg.eta = 1.0;
  auto ep = fast_ep(flat, fcfg);
  REQUIRE(ep.converged);

  const EpVbReport rep = compare_ep_vb(model, ep, vb);
  CHECK((rep.u_mean_ep - rep.u_mean_vb).lpNorm<Eigen::Infinity>() < 1e-5);
  CHECK((rep.u_var_ep - rep.u_var_vb).lpNorm<Eigen::Infinity>() < 1e-5);
  CHECK(rep.b_vb.lpNorm<Eigen::Infinity>() == 0.0);  // fixed by construction
  CHECK(rep.min_pi_vb >= 0.0);
}

TEST_CASE("vb trace counts one variance computation per outer iteration") {
  ModelSpec model = laplace_model(3, 4, 4, 1.0);
  SolverConfig cfg;
  auto res = vb_solve(model, cfg);
  for (size_t i = 0; i < res.trace.size(); ++i)
    CHECK(res.trace[i].n_var_comp == long(i) + 1);
}
