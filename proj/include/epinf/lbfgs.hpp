#pragma once

// Limited-memory BFGS with a strong-Wolfe line search, for smooth convex
// objectives. The optional preconditioner supplies application of an SPD
// P^-1 used as the initial inverse-Hessian scaling.

#include <functional>

#include <Eigen/Core>

namespace epinf {

struct LbfgsOptions {
  int memory = 10;
  int max_iters = 2000;
  double grad_tol = 1e-7;  // relative: |g|_inf <= grad_tol * (1 + scale)
  // Gradient scale anchoring the relative tolerance; when <= 0 the gradient
  // at the start point is used.
  double grad_scale = -1.0;
  double wolfe_c1 = 1e-4;
  double wolfe_c2 = 0.9;
  int max_line_search = 60;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double fx = 0.0;
  Eigen::VectorXd grad;
  double g0_inf = 0.0;  // gradient sup-norm at the start point
  int iterations = 0;
  bool converged = false;
  bool line_search_failed = false;
};

// objective(x, grad) -> f(x), filling grad.
using Objective =
    std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;
using Precond = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

LbfgsResult lbfgs_minimize(const Objective& objective, Eigen::VectorXd x0,
                           const LbfgsOptions& opts = {},
                           const Precond& apply_pinv = nullptr);

}  // namespace epinf
