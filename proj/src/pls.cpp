#include "epinf/pls.hpp"

#include <cmath>
#include <stdexcept>

namespace epinf {

namespace {

struct Residual {
  double r_mean;    // tilted mean - s
  double r_second;  // tilted second moment - (z + s^2)
  double norm() const {
    return std::max(std::fabs(r_mean), std::fabs(r_second));
  }
};

struct ProfileContext {
  double s, z, pt, bt, eta;
  const SitePotential* site;
  double pi_hi;

  double clamp_pi(double pi) const {
    return std::min(std::max(pi, 0.0), pi_hi);
  }
  bool eval(double pi, double b, TiltedMoments& tm) const {
    const double pm = pt - eta * pi;
    if (!cavity_valid(pm, pt)) return false;
    tm = tilted_moments(pm, bt - eta * b, *site, eta);
    return true;
  }
  Residual residual(const TiltedMoments& tm) const {
    return {tm.mean - s, tm.second_moment - (z + s * s)};
  }
  bool scaled_ok(const Residual& r, double tol) const {
    return std::fabs(r.r_mean) <= tol * (1.0 + std::fabs(s)) &&
           std::fabs(r.r_second) <= tol * (1.0 + z + s * s);
  }
};

// One standard EP update against the target marginal N(s, z): map the
// tilted natural surplus onto new site parameters.
void ep_update(const ProfileContext& c, double& pi, double& b) {
  TiltedMoments tm;
  if (!c.eval(pi, b, tm)) return;
  const double v = tm.variance();
  const double pm = c.pt - c.eta * pi;
  const double bm = c.bt - c.eta * b;
  const double pi_new = (c.pt - 1.0 / c.z + (1.0 / v - pm)) / c.eta;
  const double b_new = (c.bt - c.s / c.z + (tm.mean / v - bm)) / c.eta;
  const double pi_c = c.clamp_pi(pi_new);
  TiltedMoments probe;
  if (c.eval(pi_c, b_new, probe)) {
    pi = pi_c;
    b = b_new;
  }
}

// 1-d solve in b at fixed pi for tilted mean = s. The mean is strictly
// decreasing in b (the cavity linear term is bt - eta b), so a bracketed
// Newton/bisection hybrid always converges.
bool solve_b_at_fixed_pi(const ProfileContext& c, double pi, double& b,
                         const PlsOptions& o, TiltedMoments& tm) {
  if (!c.eval(pi, b, tm)) {
    b = 0.0;
    if (!c.eval(pi, b, tm)) return false;
  }
  auto resid = [&](double bv, TiltedMoments& t) -> double {
    if (!c.eval(pi, bv, t)) return std::numeric_limits<double>::quiet_NaN();
    return t.mean - c.s;
  };
  // The residual r(b) is strictly decreasing. Find b1 < b2 with
  // r(b1) > 0 > r(b2), expanding geometrically from the start point.
  double b1 = b, b2 = b;
  double r1 = tm.mean - c.s, r2 = r1;
  double span = 1.0 + std::fabs(b);
  for (int it = 0; it < 200 && r1 <= 0.0; ++it) {
    b1 -= span;
    span *= 2.0;
    TiltedMoments t;
    r1 = resid(b1, t);
    if (std::isnan(r1)) return false;
  }
  span = 1.0 + std::fabs(b);
  for (int it = 0; it < 200 && r2 >= 0.0; ++it) {
    b2 += span;
    span *= 2.0;
    TiltedMoments t;
    r2 = resid(b2, t);
    if (std::isnan(r2)) return false;
  }
  if (!(r1 > 0.0 && r2 < 0.0)) return false;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (b1 + b2);
    TiltedMoments t;
    const double rm = resid(mid, t);
    if (std::isnan(rm)) return false;
    if (std::fabs(rm) <= o.site_tol * (1.0 + std::fabs(c.s))) {
      b = mid;
      tm = t;
      return true;
    }
    (rm > 0.0 ? b1 : b2) = mid;
    if (b2 - b1 < 1e-16 * (1.0 + std::fabs(mid))) {
      b = mid;
      tm = t;
      return std::fabs(rm) <= 1e-7 * (1.0 + std::fabs(c.s));
    }
  }
  return false;
}

// Robust fallback: the profiled psi is convex in pi, so the second-moment
// residual g(pi) = E[s^2](pi, b*(pi)) - (z + s^2) is nondecreasing; nested
// bisection cannot fail where a minimizer exists.
bool nested_bisection(const ProfileContext& c, const PlsOptions& o, double& pi,
                      double& b, TiltedMoments& tm) {
  auto g_of_pi = [&](double p, double& bv, TiltedMoments& t) -> double {
    if (!solve_b_at_fixed_pi(c, p, bv, o, t))
      return std::numeric_limits<double>::quiet_NaN();
    return t.second_moment - (c.z + c.s * c.s);
  };
  double b_lo = b, b_hi = b;
  TiltedMoments t_lo, t_hi;
  const double g0 = g_of_pi(0.0, b_lo, t_lo);
  if (std::isnan(g0)) return false;
  if (g0 >= 0.0) {  // KKT: boundary minimum at pi = 0
    pi = 0.0;
    b = b_lo;
    tm = t_lo;
    return true;
  }
  const double ghi = g_of_pi(c.pi_hi, b_hi, t_hi);
  if (std::isnan(ghi) || ghi <= 0.0) {  // pinned at the cap
    pi = c.pi_hi;
    b = b_hi;
    tm = t_hi;
    return !std::isnan(ghi);
  }
  double lo = 0.0, hi = c.pi_hi;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    double bm = b;
    TiltedMoments t;
    const double gm = g_of_pi(mid, bm, t);
    if (std::isnan(gm)) return false;
    if (std::fabs(gm) <= o.site_tol * (1.0 + c.z + c.s * c.s)) {
      pi = mid;
      b = bm;
      tm = t;
      return true;
    }
    (gm < 0.0 ? lo : hi) = mid;
    if (hi - lo < 1e-16 * (1.0 + mid)) {
      pi = mid;
      b = bm;
      tm = t;
      return std::fabs(gm) <= 1e-7 * (1.0 + c.z + c.s * c.s);
    }
  }
  return false;
}

}  // namespace

SiteProfileResult site_profile(double s, double z_i, double pi_tilde_i,
                               double b_tilde_i, const SitePotential& site,
                               double eta, double init_pi, double init_b,
                               const PlsOptions& opts) {
  if (!(z_i > 0.0)) throw std::invalid_argument("site_profile: z must be > 0");
  if (!(pi_tilde_i > 0.0))
    throw std::invalid_argument("site_profile: pi_tilde must be > 0");

  ProfileContext c;
  c.s = s;
  c.z = z_i;
  c.pt = pi_tilde_i;
  c.bt = b_tilde_i;
  c.eta = eta;
  c.site = &site;
  c.pi_hi = std::min(opts.pi_max, (1.0 - 2.0 * kCavityFloor) * pi_tilde_i / eta);

  auto finish = [&](double pi, double b, const TiltedMoments& tm,
                    bool at_lo) -> SiteProfileResult {
    SiteProfileResult r;
    r.pi = pi;
    r.b = b;
    r.mean = tm.mean;
    r.second_moment = tm.second_moment;
    r.at_lower_bound = at_lo;
    r.at_upper_bound = pi >= c.pi_hi * (1.0 - 1e-12);
    r.psi = -(z_i + s * s) * pi + 2.0 * b * s + (2.0 / eta) * tm.log_zhat;
    return r;
  };

  // Flat and Gaussian sites have closed-form minimizers.
  if (site.kind != SitePotential::Kind::Laplace) {
    const double site_prec =
        site.kind == SitePotential::Kind::Gaussian ? eta / site.var : 0.0;
    const double site_lin =
        site.kind == SitePotential::Kind::Gaussian ? eta * site.mean / site.var
                                                   : 0.0;
    double pi = (pi_tilde_i - 1.0 / z_i + site_prec) / eta;
    double b;
    bool at_lo = false;
    if (pi < 0.0 || pi > c.pi_hi) {
      pi = c.clamp_pi(pi);
      at_lo = pi == 0.0;
      // Remaining 1-d stationarity: tilted mean = s at fixed pi.
      const double pm = pi_tilde_i - eta * pi;
      b = (b_tilde_i + site_lin - s * (pm + site_prec)) / eta;
    } else {
      b = (b_tilde_i - s / z_i + site_lin) / eta;
    }
    TiltedMoments tm;
    if (!c.eval(pi, b, tm))
      throw std::runtime_error("site_profile: cavity collapse (closed form)");
    return finish(pi, b, tm, at_lo);
  }

  // Laplace: two EP updates, then damped Newton with a finite-difference
  // Jacobian on the moment residuals.
  double pi = c.clamp_pi(init_pi);
  double b = init_b;
  TiltedMoments tm;
  if (!c.eval(pi, b, tm)) {
    pi = c.clamp_pi(0.5 * pi_tilde_i / eta);
    b = 0.0;
    if (!c.eval(pi, b, tm))
      throw std::runtime_error("site_profile: no valid starting cavity");
  }
  ep_update(c, pi, b);
  ep_update(c, pi, b);
  if (!c.eval(pi, b, tm))
    throw std::runtime_error("site_profile: cavity collapse after EP updates");

  Residual r = c.residual(tm);
  for (int it = 0; it < opts.max_newton; ++it) {
    if (c.scaled_ok(r, opts.site_tol)) return finish(pi, b, tm, pi == 0.0);
    // Finite-difference Jacobian of (mean, second) w.r.t. (pi, b).
    const double hp = 1e-7 * (1.0 + std::fabs(pi));
    const double hb = 1e-7 * (1.0 + std::fabs(b));
    TiltedMoments tp_hi, tp_lo, tb_hi, tb_lo;
    const double pi_hi_probe = c.clamp_pi(pi + hp);
    const double pi_lo_probe = c.clamp_pi(pi - hp);
    if (!c.eval(pi_hi_probe, b, tp_hi) || !c.eval(pi_lo_probe, b, tp_lo) ||
        !c.eval(pi, b + hb, tb_hi) || !c.eval(pi, b - hb, tb_lo))
      throw std::runtime_error("site_profile: cavity collapse in Jacobian");
    const double dp = pi_hi_probe - pi_lo_probe;
    double j11 = (tp_hi.mean - tp_lo.mean) / dp;
    double j12 = (tb_hi.mean - tb_lo.mean) / (2.0 * hb);
    double j21 = (tp_hi.second_moment - tp_lo.second_moment) / dp;
    double j22 = (tb_hi.second_moment - tb_lo.second_moment) / (2.0 * hb);
    const double det = j11 * j22 - j12 * j21;
    double dpi, db;
    if (std::fabs(det) < 1e-300) {
      dpi = 0.0;
      db = -r.r_mean / (j12 != 0.0 ? j12 : 1.0);
    } else {
      dpi = -(j22 * r.r_mean - j12 * r.r_second) / det;
      db = -(-j21 * r.r_mean + j11 * r.r_second) / det;
    }
    // Damped step with projection onto the pi box.
    double t = 1.0;
    bool moved = false;
    for (int half = 0; half < 40; ++half) {
      const double pn = c.clamp_pi(pi + t * dpi);
      const double bn = b + t * db;
      TiltedMoments tn;
      if (c.eval(pn, bn, tn)) {
        const Residual rn = c.residual(tn);
        if (rn.norm() < r.norm() || c.scaled_ok(rn, opts.site_tol)) {
          pi = pn;
          b = bn;
          tm = tn;
          r = rn;
          moved = true;
          break;
        }
      }
      t *= 0.5;
    }
    if (!moved) break;  // hand over to the bisection fallback
  }
  if (c.scaled_ok(r, opts.site_tol)) return finish(pi, b, tm, pi == 0.0);
  if (!nested_bisection(c, opts, pi, b, tm))
    throw std::runtime_error("site_profile: no convergence after max Newton steps");
  return finish(pi, b, tm, pi == 0.0);
}

PlsResult pls_solve(const Vec& z, const TildeParams& tt, const ModelSpec& model,
                    const std::optional<PlsWarmStart>& warm,
                    const PlsOptions& opts) {
  model.validate();
  const Eigen::Index q = model.q();
  if (z.size() != q) throw std::invalid_argument("pls_solve: z length != q");
  if ((z.array() <= 0.0).any())
    throw std::invalid_argument("pls_solve: z must be > 0");

  // Per-site warm starts carried across objective evaluations.
  Vec pi_ws(q), b_ws(q);
  if (warm && warm->th.pi.size() == q) {
    pi_ws = warm->th.pi;
    b_ws = warm->th.b;
  } else {
    for (Eigen::Index i = 0; i < q; ++i) {
      pi_ws[i] = std::max(0.0, (tt.pi_tilde[i] - 1.0 / z[i]) / model.eta);
      b_ws[i] = 0.0;
    }
  }
  const double inv_nv = 1.0 / model.noise_var;

  Vec cur_pi = pi_ws, cur_b = b_ws;
  auto objective = [&](const Vec& u, Vec& grad) -> double {
    const Vec xu = model.X->apply(u);
    const Vec s = model.B->apply(u);
    double f = (model.y - xu).squaredNorm() * inv_nv;
    for (Eigen::Index i = 0; i < q; ++i) {
      SiteProfileResult sp;
      try {
        sp = site_profile(s[i], z[i], tt.pi_tilde[i], tt.b_tilde[i],
                          model.sites[i], model.eta, pi_ws[i], b_ws[i], opts);
      } catch (const std::exception& e) {
        throw std::runtime_error("pls_solve: site " + std::to_string(i) +
                                 ": " + e.what());
      }
      f -= sp.psi;
      cur_pi[i] = sp.pi;
      cur_b[i] = sp.b;
      pi_ws[i] = sp.pi;
      b_ws[i] = sp.b;
    }
    grad = 2.0 * inv_nv * model.X->apply_adjoint(xu - model.y) +
           2.0 * model.B->apply_adjoint(cur_pi.cwiseProduct(s) - cur_b);
    return f;
  };

  LbfgsOptions lo;
  lo.grad_tol = opts.grad_tol;
  lo.max_iters = opts.max_iters;
  {
    // The convergence scale is |grad f(0)|, independent of any warm start.
    Vec g0(model.n());
    objective(Vec::Zero(model.n()), g0);
    lo.grad_scale = g0.lpNorm<Eigen::Infinity>();
  }
  Vec u0 = warm && warm->u.size() == model.n() ? warm->u
                                               : Vec::Zero(model.n());
  LbfgsResult lr = lbfgs_minimize(objective, std::move(u0), lo,
                                  opts.precondition);
  if (lr.line_search_failed) {
    // A stall within two orders of the target gradient is the noise floor
    // of the profiled objective; anything worse is a genuine failure.
    if (lr.grad.lpNorm<Eigen::Infinity>() >
        100.0 * lo.grad_tol * (1.0 + lr.g0_inf))
      throw std::runtime_error("pls_solve: line search failure");
  }

  PlsResult res;
  res.u_star = lr.x;
  // One final evaluation pins (theta, objective) to the returned u*.
  Vec grad(model.n());
  res.objective = objective(res.u_star, grad);
  res.s_star = model.B->apply(res.u_star);
  res.th.pi = cur_pi;
  res.th.b = cur_b;
  res.iterations = lr.iterations;
  res.converged = lr.converged;
  return res;
}

UpdateTtilResult update_ttil(const Vec& z, double gstar, const TildeParams& tt,
                             const ModelSpec& model,
                             const std::optional<PlsWarmStart>& warm,
                             const PlsOptions& opts) {
  if ((z.array() <= 0.0).any())
    throw std::invalid_argument("update_ttil: z must be > 0");
  UpdateTtilResult res;
  // rho <- z keeping the current mu.
  Vec mu = tt.mu();
  res.tt.pi_tilde = z.cwiseInverse();
  res.tt.b_tilde = mu.cwiseQuotient(z);

  std::optional<PlsWarmStart> ws = warm;
  double phi_prev = std::numeric_limits<double>::infinity();
  TildeParams tt_cur = res.tt;
  for (int k = 0; k < opts.max_pls_calls; ++k) {
    PlsResult pls = pls_solve(z, tt_cur, model, ws, opts);
    ++res.pls_calls;
    const double phi_k =
        phi_decoupled_from_pls(pls.objective, gstar, tt_cur, model);
    if (k > 0 && delta_metric(phi_prev, phi_k) > 1e-9)
      throw std::runtime_error(
          "update_ttil: phi(z, theta~) increased beyond tolerance");
    res.tt = tt_cur;
    res.th = pls.th;
    res.u_star = pls.u_star;
    res.phi = phi_k;
    double mu_move = 0.0;
    if (opts.mu_tol > 0.0) {
      const Vec mu_cur = tt_cur.mu();
      for (Eigen::Index i = 0; i < mu_cur.size(); ++i)
        mu_move = std::max(mu_move,
                           std::fabs(pls.s_star[i] - mu_cur[i]) /
                               (1.0 + std::fabs(pls.s_star[i])));
    }
    if (k > 0 && std::fabs(delta_metric(phi_k, phi_prev)) < opts.tol_inner &&
        (opts.mu_tol <= 0.0 || mu_move < opts.mu_tol)) {
      res.converged = true;
      return res;
    }
    phi_prev = phi_k;
    // mu <- s*, rho stays z.
    tt_cur.b_tilde = pls.s_star.cwiseQuotient(z);
    ws = PlsWarmStart{pls.u_star, pls.th};
  }
  return res;
}

}  // namespace epinf
