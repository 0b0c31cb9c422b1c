#pragma once

// The four EP solvers sharing one energy and one Gaussian backend:
// sequential EP, parallel EP, the Opper-Winther inner ascent used as the
// convergence fallback, and the fast double-loop algorithm.

#include <optional>
#include <vector>

#include "epinf/energy.hpp"
#include "epinf/gauss.hpp"
#include "epinf/model.hpp"
#include "epinf/pls.hpp"

namespace epinf {

enum class SolverKind { Sequential, Parallel, Fast, Vb };

struct SolverConfig {
  double eta = 0.9;            // overrides ModelSpec::eta when > 0
  double epsilon = 1e-5;       // Alg. 1 sufficient-descent threshold
  double damping = 0.9;        // update fraction gamma for seq/parallel
  int max_outer = 200;
  double tol_fixed_point = 1e-6;
  SolverKind solver_kind = SolverKind::Fast;
  PlsOptions pls;
  // Wall-clock cap in seconds (0 = none); exceeding it stops the solver
  // with converged = false.
  double max_seconds = 0.0;
  // Sequential EP: refresh the maintained inverse every this many sweeps.
  int refresh_every = 4;

  void validate() const;
};

struct TraceRow {
  int outer = 0;
  double time_sec = 0.0;
  double phi = 0.0;
  long n_var_comp = 0;
  bool fallback = false;
};

using SolverTrace = std::vector<TraceRow>;

struct SolverResult {
  SiteParams th;
  TildeParams tt;
  GaussState gauss;   // fresh at the returned theta
  SolverTrace trace;
  double phi_star = 0.0;      // consistent-marginal energy at the final theta
  double residual = 0.0;      // ep_fixed_point_residual at the final state
  long n_var_comp = 0;
  bool converged = false;
  bool diverged = false;
  bool fallback_used = false;
};

// Max over sites of the normalized tilted-vs-marginal moment mismatches,
// |mu - s*|_inf and |rho - z|_inf; zero exactly at expectation consistency.
double ep_fixed_point_residual(const SiteParams& th, const TildeParams& tt,
                               const ModelSpec& model, const GaussState& gauss);

SolverResult sequential_ep(const ModelSpec& model, const SolverConfig& config);
SolverResult parallel_ep(const ModelSpec& model, const SolverConfig& config);
SolverResult fast_ep(const ModelSpec& model, const SolverConfig& config);

// One quasi-Newton ascent iteration on phi(theta, theta~) for fixed theta~,
// using the moment-difference gradients. Every Gaussian refresh triggered by
// a line-search probe increments n_var_comp.
struct OwStepResult {
  SiteParams th;
  GaussState gauss;
  double phi = 0.0;
  bool moved = false;
};
OwStepResult ow_inner_max_step(const SiteParams& th, const TildeParams& tt,
                               const ModelSpec& model,
                               const SolverConfig& config,
                               const GaussState* gauss_at_th,
                               long& n_var_comp);

// Initialization shared by all solvers: pi_i = tau_i^2 for Laplace sites
// (1 otherwise), b = 0.
SiteParams default_init(const ModelSpec& model);

// theta~ read off the marginals of a Gaussian state.
TildeParams marginals_of(const ModelSpec& model, const GaussState& gauss);

SolverResult run_solver(const ModelSpec& model, const SolverConfig& config);

}  // namespace epinf
