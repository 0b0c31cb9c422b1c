#include "epinf/lbfgs.hpp"

#include <cmath>
#include <deque>

namespace epinf {

namespace {

struct Pair {
  Eigen::VectorXd s, y;
  double rho;
};

// Strong Wolfe line search (Nocedal & Wright alg. 3.5/3.6 style with
// bisection-quadratic zoom).
bool wolfe_search(const Objective& f, const Eigen::VectorXd& x,
                  const Eigen::VectorXd& d, double f0, double g0,
                  const LbfgsOptions& o, double& t, Eigen::VectorXd& xn,
                  double& fn, Eigen::VectorXd& gn) {
  double lo = 0.0, hi = 0.0;
  double f_lo = f0;
  bool bracketed = false;
  double t_prev = 0.0, f_prev = f0;
  for (int it = 0; it < o.max_line_search; ++it) {
    xn = x + t * d;
    fn = f(xn, gn);
    const double gd = gn.dot(d);
    if (!std::isfinite(fn)) {
      hi = t;
      bracketed = true;
    } else if (fn > f0 + o.wolfe_c1 * t * g0 || (it > 0 && fn >= f_prev)) {
      lo = t_prev;
      f_lo = f_prev;
      hi = t;
      bracketed = true;
    } else if (std::fabs(gd) <= -o.wolfe_c2 * g0) {
      return true;
    } else if (gd >= 0.0) {
      lo = t;
      f_lo = fn;
      hi = t_prev;
      bracketed = true;
    }
    if (bracketed) break;
    t_prev = t;
    f_prev = fn;
    t *= 2.0;
  }
  if (!bracketed) return false;
  for (int it = 0; it < o.max_line_search; ++it) {
    t = 0.5 * (lo + hi);
    xn = x + t * d;
    fn = f(xn, gn);
    const double gd = gn.dot(d);
    if (!std::isfinite(fn) || fn > f0 + o.wolfe_c1 * t * g0 || fn >= f_lo) {
      hi = t;
    } else {
      if (std::fabs(gd) <= -o.wolfe_c2 * g0) return true;
      if (gd * (hi - lo) >= 0.0) hi = lo;
      lo = t;
      f_lo = fn;
    }
    if (std::fabs(hi - lo) < 1e-16 * (1.0 + std::fabs(lo))) break;
  }
  // Accept the best sufficient-decrease point even if curvature is loose.
  xn = x + lo * d;
  fn = f(xn, gn);
  t = lo;
  return lo > 0.0 && fn < f0;
}

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& raw_objective, Eigen::VectorXd x0,
                           const LbfgsOptions& opts, const Precond& apply_pinv) {
  LbfgsResult res;
  // Track the best point seen anywhere, including rejected probes.
  double best_f = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_x, best_g;
  auto objective = [&](const Eigen::VectorXd& x,
                       Eigen::VectorXd& g) -> double {
    const double f = raw_objective(x, g);
    if (std::isfinite(f) && f < best_f) {
      best_f = f;
      best_x = x;
      best_g = g;
    }
    return f;
  };
  res.x = std::move(x0);
  res.grad.resize(res.x.size());
  res.fx = objective(res.x, res.grad);
  res.g0_inf = opts.grad_scale > 0.0 ? opts.grad_scale
                                     : res.grad.lpNorm<Eigen::Infinity>();
  const double tol = opts.grad_tol * (1.0 + res.g0_inf);

  std::deque<Pair> mem;
  Eigen::VectorXd q, d, xn, gn;
  double gamma = 1.0;
  double fn = 0.0;
  for (res.iterations = 0; res.iterations < opts.max_iters; ++res.iterations) {
    if (res.grad.lpNorm<Eigen::Infinity>() <= tol) {
      res.converged = true;
      return res;
    }
    // Two-loop recursion.
    q = res.grad;
    std::vector<double> alpha(mem.size());
    for (int i = int(mem.size()) - 1; i >= 0; --i) {
      alpha[i] = mem[i].rho * mem[i].s.dot(q);
      q -= alpha[i] * mem[i].y;
    }
    if (apply_pinv) {
      q = apply_pinv(q);
      if (!mem.empty()) q *= gamma;
    } else {
      q *= gamma;
    }
    for (size_t i = 0; i < mem.size(); ++i) {
      const double beta = mem[i].rho * mem[i].y.dot(q);
      q += (alpha[i] - beta) * mem[i].s;
    }
    d = -q;
    double gd = res.grad.dot(d);
    if (gd >= 0.0) {  // safeguard: fall back to steepest descent
      d = apply_pinv ? -apply_pinv(res.grad) : -res.grad;
      gd = res.grad.dot(d);
      mem.clear();
    }
    double t = res.iterations == 0 ? 1.0 / (1.0 + res.grad.norm()) : 1.0;
    if (!wolfe_search(objective, res.x, d, res.fx, gd, opts, t, xn, fn, gn)) {
      // Stalled, typically at the noise floor of the objective; return the
      // best point seen and let the caller judge the gradient.
      if (best_f < res.fx) {
        res.x = best_x;
        res.fx = best_f;
        res.grad = best_g;
      }
      res.converged = res.grad.lpNorm<Eigen::Infinity>() <= tol;
      res.line_search_failed = !res.converged;
      return res;
    }
    Pair p;
    p.s = xn - res.x;
    p.y = gn - res.grad;
    const double sy = p.s.dot(p.y);
    if (sy > 1e-14 * p.s.norm() * p.y.norm()) {
      p.rho = 1.0 / sy;
      if (apply_pinv) {
        gamma = sy / p.y.dot(apply_pinv(p.y));
      } else {
        gamma = sy / p.y.squaredNorm();
      }
      mem.push_back(std::move(p));
      if (int(mem.size()) > opts.memory) mem.pop_front();
    }
    res.x.swap(xn);
    res.grad.swap(gn);
    res.fx = fn;
  }
  res.converged = res.grad.lpNorm<Eigen::Infinity>() <= tol;
  return res;
}

}  // namespace epinf
