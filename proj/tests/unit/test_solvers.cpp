#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "epinf/oracle.hpp"
#include "epinf/solvers.hpp"

using namespace epinf;

namespace {

std::mt19937_64 rng(31);

Vec randn(Eigen::Index n) {
  std::normal_distribution<double> gn;
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = gn(rng);
  return v;
}

ModelSpec random_model(int n, int m, int q, double tau, double eta,
                       double nv = 1.0) {
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
  model.eta = eta;
  return model;
}

ModelSpec flat_model(int n, int q) {
  ModelSpec model = random_model(n, n + 2, q, 1.0, 1.0);
  model.sites.assign(size_t(q), SitePotential::flat());
  return model;
}

}  // namespace

TEST_CASE("residual: exact on an all-flat state, positive off it") {
  ModelSpec model = flat_model(3, 4);
  SiteParams th = SiteParams::zeros(4);
  GaussState g = build_gauss_state(model, th);
  TildeParams tt = marginals_of(model, g);
  CHECK(ep_fixed_point_residual(th, tt, model, g) <= 1e-12);

  SiteParams perturbed{Vec::Constant(4, 0.3), Vec::Zero(4)};
  GaussState g2 = build_gauss_state(model, perturbed);
  TildeParams tt2 = marginals_of(model, g2);
  CHECK(ep_fixed_point_residual(perturbed, tt2, model, g2) > 1e-3);
}

TEST_CASE("sequential EP: all-flat model reaches the exact posterior") {
  // damping makes the site parameters decay geometrically, so the exact
  // fixed point is approached at the damping rate rather than in one sweep
  ModelSpec model = flat_model(4, 5);
  SolverConfig cfg;
  cfg.solver_kind = SolverKind::Sequential;
  cfg.eta = 1.0;
  cfg.tol_fixed_point = 1e-10;
  auto res = sequential_ep(model, cfg);
  CHECK(res.converged);
  CHECK(res.residual <= 1e-8);
  // exact posterior of the Gaussian model
  Mat x = model.X->to_dense();
  Vec want = (x.transpose() * x).ldlt().solve(x.transpose() * model.y);
  CHECK((res.gauss.u_star - want).lpNorm<Eigen::Infinity>() <=
        1e-6 * (1.0 + want.lpNorm<Eigen::Infinity>()));
  CHECK(res.th.pi.lpNorm<Eigen::Infinity>() <= 1e-6);
}

TEST_CASE("sequential EP: single laplace site matches the true posterior") {
  // one site, eta = 1: the EP fixed point reproduces the exact first two
  // posterior moments of s (single-site EP is exact moment matching)
  ModelSpec model;
  Mat x(2, 1), b(1, 1);
  x << 1.0, 0.4;
  b << 1.0;
  model.X = dense_op(x);
  model.B = dense_op(b);
  model.y = Vec(2);
  model.y << 1.2, -0.3;
  model.noise_var = 0.5;
  model.sites.assign(1, SitePotential::laplace(1.4));
  model.eta = 1.0;

  SolverConfig cfg;
  cfg.solver_kind = SolverKind::Sequential;
  cfg.eta = 1.0;
  cfg.tol_fixed_point = 1e-10;
  auto res = sequential_ep(model, cfg);
  REQUIRE(res.converged);

  // brute posterior moments of u (= s here) by quadrature
  const double lz = oracle::quad_logz_model(model, 1e-11);
  auto moment = [&](int k) {
    const int nquad = 400001;
    double acc = 0.0;
    const double lo = -6.0, hi = 6.0;
    const double h = (hi - lo) / (nquad - 1);
    for (int i = 0; i < nquad; ++i) {
      const double u = lo + i * h;
      const double w = (i == 0 || i == nquad - 1) ? 0.5 : 1.0;
      const double lp =
          -0.5 * (model.y - x * Vec::Constant(1, u)).squaredNorm() /
              model.noise_var -
          std::log(2.0 * M_PI * model.noise_var) - 1.4 * std::fabs(u);
      acc += w * std::pow(u, k) * std::exp(lp - lz);
    }
    return acc * h;
  };
  const double z_check = moment(0);
  REQUIRE(z_check == doctest::Approx(1.0).epsilon(1e-6));
  const double mean = moment(1);
  const double var = moment(2) - mean * mean;
  CHECK(res.gauss.u_star[0] == doctest::Approx(mean).epsilon(1e-6));
  CHECK(res.gauss.z[0] == doctest::Approx(var).epsilon(1e-6));
}

TEST_CASE("parallel EP: all-flat model converges immediately") {
  ModelSpec model = flat_model(4, 5);
  SolverConfig cfg;
  cfg.solver_kind = SolverKind::Parallel;
  cfg.eta = 1.0;
  cfg.tol_fixed_point = 1e-10;
  auto res = parallel_ep(model, cfg);
  CHECK(res.converged);
  CHECK(res.residual <= 1e-8);
  CHECK_FALSE(res.diverged);
}

TEST_CASE("fast EP: all-flat model stops at the exact fixed point") {
  ModelSpec model = flat_model(4, 5);
  SolverConfig cfg;
  cfg.solver_kind = SolverKind::Fast;
  cfg.eta = 1.0;
  auto res = fast_ep(model, cfg);
  CHECK(res.converged);
  CHECK(res.residual <= 1e-6);
  CHECK_FALSE(res.fallback_used);
}

TEST_CASE("fast EP: toy laplace model descends and reaches consistency") {
  ModelSpec model = random_model(4, 6, 6, 1.2, 0.9);
  SolverConfig cfg;
  auto res = fast_ep(model, cfg);
  REQUIRE(res.converged);
  CHECK(res.residual < 1e-5);
  CHECK_FALSE(res.fallback_used);
  // accepted-step phi values strictly decrease
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& row : res.trace) {
    if (row.outer == 0) continue;
    CHECK(row.phi < prev + 1e-12);
    prev = row.phi;
  }
  // elapsed time nondecreasing
  for (size_t i = 1; i < res.trace.size(); ++i)
    CHECK(res.trace[i].time_sec >= res.trace[i - 1].time_sec);
}

TEST_CASE("cross-solver agreement on an 8x8-like random toy") {
  ModelSpec model = random_model(8, 12, 12, 1.0, 0.9, 0.5);
  SolverConfig cfg;
  cfg.tol_fixed_point = 1e-8;

  cfg.solver_kind = SolverKind::Sequential;
  auto seq = sequential_ep(model, cfg);
  cfg.solver_kind = SolverKind::Parallel;
  auto par = parallel_ep(model, cfg);
  cfg.solver_kind = SolverKind::Fast;
  auto fast = fast_ep(model, cfg);

  REQUIRE(seq.converged);
  REQUIRE(par.converged);
  REQUIRE(fast.converged);
  CHECK(std::fabs(delta_metric(seq.phi_star, par.phi_star)) < 1e-4);
  CHECK(std::fabs(delta_metric(seq.phi_star, fast.phi_star)) < 1e-4);
  CHECK(std::fabs(delta_metric(par.phi_star, fast.phi_star)) < 1e-4);
}

TEST_CASE("ow step: identity at a stationary point, ascent otherwise") {
  ModelSpec model = random_model(3, 5, 5, 1.0, 0.9);
  SolverConfig cfg;
  auto fast = fast_ep(model, cfg);
  REQUIRE(fast.converged);

  // at the converged state the inner gradient nearly vanishes
  long nv = 0;
  auto step = ow_inner_max_step(fast.th, fast.tt, model, cfg, &fast.gauss, nv);
  CHECK(std::fabs(delta_metric(step.phi, phi_total(fast.th, fast.tt, model,
                                                   fast.gauss)
                                             .phi)) < 5e-5);

  // from a perturbed theta the step ascends phi(theta, theta~)
  SiteParams th2{fast.th.pi * 0.7, fast.th.b};
  GaussState g2 = build_gauss_state(model, th2);
  const double phi2 = phi_total(th2, fast.tt, model, g2).phi;
  auto step2 = ow_inner_max_step(th2, fast.tt, model, cfg, &g2, nv);
  CHECK(step2.moved);
  CHECK(step2.phi > phi2);
}

TEST_CASE("ow gradients match finite differences of phi(theta, theta~)") {
  ModelSpec model = random_model(3, 4, 4, 1.1, 0.8);
  SiteParams th{Vec::Constant(4, 0.6), 0.1 * randn(4)};
  GaussState g = build_gauss_state(model, th);
  TildeParams tt = marginals_of(model, g);
  // analytic gradients
  const Vec s_star = g.s_star(model);
  const CavityParams cav = cavity(tt, th, model.eta);
  Vec gb(4), gp(4);
  for (int i = 0; i < 4; ++i) {
    const auto tm = tilted_moments(cav.pi_minus[i], cav.b_minus[i],
                                   model.sites[size_t(i)], model.eta);
    gb[i] = 2.0 * (tm.mean - s_star[i]);
    gp[i] = (g.z[i] + s_star[i] * s_star[i]) - tm.second_moment;
  }
  auto phi_of = [&](const SiteParams& t) {
    return phi_total(t, tt, model, build_gauss_state(model, t)).phi;
  };
  auto fb = [&](const Vec& b) { return phi_of({th.pi, b}); };
  auto fp = [&](const Vec& p) { return phi_of({p, th.b}); };
  const Vec fdb = oracle::fd_gradient(fb, th.b, 1e-6);
  const Vec fdp = oracle::fd_gradient(fp, th.pi, 1e-6);
  CHECK((fdb - gb).lpNorm<Eigen::Infinity>() <=
        1e-5 * (1.0 + gb.lpNorm<Eigen::Infinity>()));
  CHECK((fdp - gp).lpNorm<Eigen::Infinity>() <=
        1e-5 * (1.0 + gp.lpNorm<Eigen::Infinity>()));
}

TEST_CASE("repeated ow steps reach the oracle inner maximum") {
  ModelSpec model = random_model(2, 3, 3, 1.0, 0.9);
  SiteParams th{Vec::Constant(3, 0.4), Vec::Zero(3)};
  GaussState g = build_gauss_state(model, th);
  TildeParams tt = marginals_of(model, g);
  SolverConfig cfg;
  long nv = 0;
  double phi = phi_total(th, tt, model, g).phi;
  for (int it = 0; it < 300; ++it) {
    auto step = ow_inner_max_step(th, tt, model, cfg, &g, nv);
    th = step.th;
    g = std::move(step.gauss);
    if (!step.moved) break;
    phi = step.phi;
  }
  const double want =
      oracle::max_theta_coupled(model, tt, 99, 2) + phi_cup(tt, model.eta);
  CHECK(phi == doctest::Approx(want).epsilon(2e-6));
}

TEST_CASE("fast EP counts variance computations in the trace") {
  ModelSpec model = random_model(4, 6, 6, 1.0, 0.9);
  SolverConfig cfg;
  auto res = fast_ep(model, cfg);
  REQUIRE(!res.trace.empty());
  for (size_t i = 1; i < res.trace.size(); ++i)
    CHECK(res.trace[i].n_var_comp >= res.trace[i - 1].n_var_comp);
  CHECK(res.n_var_comp >= long(res.trace.size()) - 1);
}
