#include "epinf/oracle.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace epinf {
namespace oracle {

namespace {

// Gauss-Kronrod 7-15 nodes/weights on [-1, 1] (QUADPACK dqk15 constants).
const double kXgk[8] = {0.991455371120813, 0.949107912342759,
                        0.864864423359769, 0.741531185599394,
                        0.586087235467691, 0.405845151377397,
                        0.207784955007898, 0.0};
const double kWgk[8] = {0.022935322010529, 0.063092092629979,
                        0.104790010322250, 0.140653259715525,
                        0.169004726639267, 0.190350578064785,
                        0.204432940075298, 0.209482141084728};
const double kWg[4] = {0.129484966168870, 0.279705391489277,
                       0.381830050505119, 0.417959183673469};

struct GkResult {
  double value;
  double error;
};

GkResult gk15(const std::function<double(double)>& f, double a, double b) {
  const double c = 0.5 * (a + b), h = 0.5 * (b - a);
  double resk = 0.0, resg = 0.0;
  const double fc = f(c);
  resk += kWgk[7] * fc;
  resg += kWg[3] * fc;
  for (int j = 0; j < 7; ++j) {
    const double x = h * kXgk[j];
    const double f1 = f(c - x), f2 = f(c + x);
    resk += kWgk[j] * (f1 + f2);
    if (j % 2 == 1) resg += kWg[j / 2] * (f1 + f2);
  }
  return {resk * h, std::fabs((resk - resg) * h)};
}

// Worst-first panel refinement with a hard budget, so unreachable tolerances
// degrade gracefully instead of recursing forever.
double adaptive_quad(const std::function<double(double)>& f, double a,
                     double b, double abs_tol, int max_panels = 4000) {
  struct Panel {
    double a, b, value, error;
  };
  std::vector<Panel> panels;
  const GkResult r0 = gk15(f, a, b);
  panels.push_back({a, b, r0.value, r0.error});
  double total_err = r0.error;
  while (total_err > abs_tol && int(panels.size()) < max_panels) {
    size_t worst = 0;
    for (size_t i = 1; i < panels.size(); ++i)
      if (panels[i].error > panels[worst].error) worst = i;
    const Panel p = panels[worst];
    if (p.b - p.a < 1e-300 * (1.0 + std::fabs(p.a))) break;
    const double m = 0.5 * (p.a + p.b);
    const GkResult r1 = gk15(f, p.a, m);
    const GkResult r2 = gk15(f, m, p.b);
    total_err += r1.error + r2.error - p.error;
    panels[worst] = {p.a, m, r1.value, r1.error};
    panels.push_back({m, p.b, r2.value, r2.error});
  }
  double v = 0.0;
  for (const auto& p : panels) v += p.value;
  return v;
}

double log_site(const SitePotential& site, double s) {
  switch (site.kind) {
    case SitePotential::Kind::Flat:
      return 0.0;
    case SitePotential::Kind::Laplace:
      return -site.tau * std::fabs(s);
    case SitePotential::Kind::Gaussian:
      return -0.5 * std::log(2.0 * M_PI * site.var) -
             (s - site.mean) * (s - site.mean) / (2.0 * site.var);
  }
  return 0.0;
}

}  // namespace

TiltedMoments quad_tilted(double pi_minus, double b_minus,
                          const SitePotential& site, double eta,
                          double rel_tol) {
  if (!(pi_minus > 0.0))
    throw std::invalid_argument("quad_tilted: cavity precision must be > 0");
  const double sigma = 1.0 / std::sqrt(pi_minus);
  const double center = b_minus / pi_minus;
  // The site factor can pull all the mass far from the cavity ball, so the
  // integration range covers the cavity, the kink at zero and every
  // piecewise-quadratic mode.
  const double lo = std::min(center, 0.0) - 40.0 * sigma;
  const double hi = std::max(center, 0.0) + 40.0 * sigma;
  auto logf = [&](double s) {
    return b_minus * s - 0.5 * pi_minus * s * s + eta * log_site(site, s);
  };

  struct Mode {
    double pos, width;
  };
  std::vector<Mode> modes;
  modes.push_back({center, sigma});
  if (site.kind == SitePotential::Kind::Laplace) {
    const double tp = eta * site.tau;
    const double sp = (b_minus - tp) / pi_minus;
    const double sn = (b_minus + tp) / pi_minus;
    if (sp > 0.0) modes.push_back({sp, sigma});
    if (sn < 0.0) modes.push_back({sn, sigma});
    // Mass pinned at the kink decays exponentially on both sides; the width
    // is set by the slower side.
    const double slope =
        std::min(std::fabs(b_minus - tp), std::fabs(b_minus + tp));
    modes.push_back({0.0, std::min(sigma, slope > 0.0 ? 1.0 / slope : sigma)});
  } else if (site.kind == SitePotential::Kind::Gaussian) {
    const double p = pi_minus + eta / site.var;
    modes.push_back({(b_minus + eta * site.mean / site.var) / p,
                     1.0 / std::sqrt(p)});
  }
  double peak = logf(std::min(std::max(center, lo), hi));
  for (const auto& md : modes)
    if (md.pos >= lo && md.pos <= hi) peak = std::max(peak, logf(md.pos));
  peak = std::max(peak, logf(0.0));

  // Knots bracket every mode at several widths so no narrow bump is missed.
  std::vector<double> knots{lo, hi};
  auto add_knot = [&](double s) {
    if (s > lo && s < hi) knots.push_back(s);
  };
  add_knot(0.0);
  for (const auto& md : modes) {
    add_knot(md.pos);
    for (double k : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
      add_knot(md.pos - k * md.width);
      add_knot(md.pos + k * md.width);
    }
  }
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());

  auto integrate = [&](const std::function<double(double)>& f,
                       double abs_tol) -> double {
    double v = 0.0;
    const double per = abs_tol / double(knots.size());
    for (size_t k = 0; k + 1 < knots.size(); ++k)
      v += adaptive_quad(f, knots[k], knots[k + 1], per);
    return v;
  };
  auto f0 = [&](double s) { return std::exp(logf(s) - peak); };
  auto f1 = [&](double s) { return s * std::exp(logf(s) - peak); };
  auto f2 = [&](double s) { return s * s * std::exp(logf(s) - peak); };

  // First pass establishes the scale of the tilted mass, second pass
  // tightens the moment tolerances relative to it.
  const double z0_rough = integrate(f0, 1e-6 * sigma);
  if (!(z0_rough > 0.0))
    throw std::runtime_error("quad_tilted: vanished integral");
  const double m1_rough = integrate(f1, 1e-6 * z0_rough * sigma) / z0_rough;
  const double z0 = integrate(f0, rel_tol * z0_rough);
  const double m2_rough =
      integrate(f2, 1e-4 * z0_rough * (m1_rough * m1_rough + sigma * sigma)) /
      z0_rough;
  const double sig_t = std::sqrt(std::max(m2_rough - m1_rough * m1_rough,
                                          1e-12 * sigma * sigma));
  const double z1 =
      integrate(f1, rel_tol * z0 * std::max(std::fabs(m1_rough), sig_t));
  const double z2 = integrate(f2, rel_tol * z0 * m2_rough);
  TiltedMoments m;
  m.log_zhat = std::log(z0) + peak;
  m.mean = z1 / z0;
  m.second_moment = z2 / z0;
  return m;
}

double quad_logz_model(const ModelSpec& model, double rel_tol) {
  model.validate();
  const int n = int(model.n());
  if (n > 3) throw std::invalid_argument("quad_logz_model: n must be <= 3");
  const Mat x = model.X->to_dense();
  const Mat b = model.B->to_dense();

  auto log_post = [&](const Vec& u) {
    const Vec r = model.y - x * u;
    const Vec s = b * u;
    double lp = -0.5 * r.squaredNorm() / model.noise_var -
                0.5 * model.m() * std::log(2.0 * M_PI * model.noise_var);
    for (Eigen::Index i = 0; i < model.q(); ++i)
      lp += log_site(model.sites[size_t(i)], s[i]);
    return lp;
  };

  // Bounding box from a deliberately loose ridge proxy.
  Mat a = x.transpose() * x / model.noise_var;
  for (Eigen::Index i = 0; i < model.q(); ++i) {
    const auto& st = model.sites[size_t(i)];
    const double prec = st.kind == SitePotential::Kind::Gaussian
                            ? 1.0 / st.var
                            : 0.1 * st.tau * st.tau + 1e-6;
    a += prec * b.row(i).transpose() * b.row(i);
  }
  const Vec u0 = a.ldlt().solve(x.transpose() * model.y / model.noise_var);
  double rad =
      18.0 /
      std::sqrt(a.selfadjointView<Eigen::Lower>().eigenvalues().minCoeff());

  double peak = log_post(u0);
  {
    std::mt19937_64 rng(12345);
    std::uniform_real_distribution<double> un(-1.0, 1.0);
    Vec u(n);
    for (int it = 0; it < 20000; ++it) {
      for (int j = 0; j < n; ++j) u[j] = u0[j] + rad * un(rng);
      peak = std::max(peak, log_post(u));
    }
  }
  // Widen until the box boundary carries negligible mass.
  for (int grow = 0; grow < 4; ++grow) {
    double worst = -std::numeric_limits<double>::infinity();
    Vec u(n);
    for (int corner = 0; corner < (1 << n); ++corner) {
      for (int j = 0; j < n; ++j)
        u[j] = u0[j] + ((corner >> j) & 1 ? rad : -rad);
      worst = std::max(worst, log_post(u));
    }
    if (worst < peak - 80.0) break;
    rad *= 2.0;
  }

  std::function<double(Vec&, int)> level = [&](Vec& u, int dim) -> double {
    if (dim == n) return std::exp(log_post(u) - peak);
    auto f = [&](double t) {
      u[dim] = t;
      return level(u, dim + 1);
    };
    const double tol = rel_tol / std::pow(2.0 * rad, n);
    return adaptive_quad(f, u0[dim] - rad, u0[dim] + rad, tol);
  };
  Vec u(n);
  const double integral = level(u, 0);
  if (!(integral > 0.0))
    throw std::runtime_error("quad_logz_model: vanished integral");
  return std::log(integral) + peak;
}

Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x,
                double h) {
  Vec g(x.size());
  Vec xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double step = h * (1.0 + std::fabs(x[i]));
    xp[i] = x[i] + step;
    const double fp = f(xp);
    xp[i] = x[i] - step;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

namespace {

struct DenseModel {
  Mat x, b;
  Vec y;
  double nv;
  double eta;
  const std::vector<SitePotential>* sites;
  double lz_const;

  Mat precision(const Vec& pi) const {
    return x.transpose() * x / nv + b.transpose() * pi.asDiagonal() * b;
  }
  bool r_min(const Vec& pi, const Vec& bb, double& rmin, double& logdet) const {
    Mat a = precision(pi);
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) return false;
    const Vec rhs = x.transpose() * y / nv + b.transpose() * bb;
    const Vec u = llt.solve(rhs);
    const Vec r = y - x * u;
    const Vec s = b * u;
    rmin = r.squaredNorm() / nv + s.cwiseProduct(pi).dot(s) - 2.0 * bb.dot(s);
    logdet = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
    return true;
  }
  Vec var_diag(const Vec& pi) const {
    Mat a = precision(pi);
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("oracle: A not PD in var_diag");
    Mat ainv = llt.solve(Mat::Identity(a.rows(), a.cols()));
    return (b * ainv * b.transpose()).diagonal();
  }
};

DenseModel densify(const ModelSpec& model) {
  DenseModel d;
  d.x = model.X->to_dense();
  d.b = model.B->to_dense();
  d.y = model.y;
  d.nv = model.noise_var;
  d.eta = model.eta;
  d.sites = &model.sites;
  d.lz_const = double(model.m()) * std::log(2.0 * M_PI * model.noise_var) -
               double(model.n()) * std::log(2.0 * M_PI);
  return d;
}

constexpr double kQuadTol = 1e-11;

// phi_cap(theta) with the inner min over v in closed form.
double phi_cap_quad(const DenseModel& d, const TildeParams& tt, const Vec& pi,
                    const Vec& bb) {
  double rmin, logdet;
  if (!d.r_min(pi, bb, rmin, logdet))
    return -std::numeric_limits<double>::infinity();  // outside concave domain
  double sum_lz = 0.0;
  for (Eigen::Index i = 0; i < pi.size(); ++i) {
    const double pm = tt.pi_tilde[i] - d.eta * pi[i];
    if (!(pm > kCavityFloor * tt.pi_tilde[i]))
      return -std::numeric_limits<double>::infinity();
    const auto tm = quad_tilted(pm, tt.b_tilde[i] - d.eta * bb[i],
                                (*d.sites)[size_t(i)], d.eta, kQuadTol);
    sum_lz += tm.log_zhat;
  }
  return -(2.0 / d.eta) * sum_lz + (logdet + rmin + d.lz_const);
}

// Concave maximization of phi_cap over theta by projected gradient ascent
// with Barzilai-Borwein steps and Armijo backtracking.
double ascend_theta(const DenseModel& d, const TildeParams& tt, Vec& pi,
                    Vec& bb, int max_iters) {
  const Eigen::Index q = pi.size();
  const double cap_mult = (1.0 - kCavityFloor) / d.eta;
  auto grad = [&](const Vec& p, const Vec& bv, Vec& gp, Vec& gb) {
    Mat a = d.precision(p);
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("oracle ascend: A not PD");
    const Vec rhs = d.x.transpose() * d.y / d.nv + d.b.transpose() * bv;
    const Vec u = llt.solve(rhs);
    const Vec s = d.b * u;
    Mat ainv = llt.solve(Mat::Identity(a.rows(), a.cols()));
    const Vec z = (d.b * ainv * d.b.transpose()).diagonal();
    for (Eigen::Index i = 0; i < q; ++i) {
      const double pm = tt.pi_tilde[i] - d.eta * p[i];
      const auto tm = quad_tilted(pm, tt.b_tilde[i] - d.eta * bv[i],
                                  (*d.sites)[size_t(i)], d.eta, kQuadTol);
      gb[i] = 2.0 * (tm.mean - s[i]);
      gp[i] = (z[i] + s[i] * s[i]) - tm.second_moment;
    }
  };

  double f = phi_cap_quad(d, tt, pi, bb);
  Vec gp(q), gb(q);
  grad(pi, bb, gp, gb);
  double t = 1e-2;
  Vec pi_prev = pi, bb_prev = bb, gp_prev = gp, gb_prev = gb;
  int flat_count = 0;
  for (int it = 0; it < max_iters && flat_count < 8; ++it) {
    Vec dp = gp, db = gb;
    for (Eigen::Index i = 0; i < q; ++i)
      if (pi[i] <= 0.0 && dp[i] < 0.0) dp[i] = 0.0;
    const double gn2 = dp.squaredNorm() + db.squaredNorm();
    if (std::sqrt(gn2) < 1e-11 * (1.0 + std::fabs(f))) break;
    double step = t;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      Vec pc =
          (pi + step * dp).cwiseMax(0.0).cwiseMin(cap_mult * tt.pi_tilde);
      Vec bc = bb + step * db;
      const double fc = phi_cap_quad(d, tt, pc, bc);
      if (std::isfinite(fc) && fc > f + 1e-8 * step * gn2) {
        if (fc - f < 1e-13 * (1.0 + std::fabs(f))) {
          ++flat_count;
        } else {
          flat_count = 0;
        }
        pi_prev = pi;
        bb_prev = bb;
        gp_prev = gp;
        gb_prev = gb;
        pi = pc;
        bb = bc;
        f = fc;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
    grad(pi, bb, gp, gb);
    const double num = (pi - pi_prev).squaredNorm() +
                       (bb - bb_prev).squaredNorm();
    const double den = (pi - pi_prev).dot(gp_prev - gp) +
                       (bb - bb_prev).dot(gb_prev - gb);
    t = den > 1e-300 ? std::min(num / den, 1e4) : step * 2.0;
  }
  return f;
}

// Damped Newton on the convex conjugate objective z'pi - log|A(pi)| with a
// gradient-step fallback. Returns NaN unless the first-order condition is
// certified, so callers can reject the probe instead of trusting a bad
// value (an unconverged solve overestimates g* and poisons the outer
// minimization).
double gstar_newton_impl(const DenseModel& d, const Vec& z, Vec& pi) {
  auto objective = [&](const Vec& p, bool& ok) {
    Mat a = d.precision(p);
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) {
      ok = false;
      return 0.0;
    }
    ok = true;
    return z.dot(p) - 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
  };
  const double gtol = 1e-9 * (1.0 + z.cwiseAbs().maxCoeff());

  std::vector<Vec> starts;
  if (pi.size() == z.size()) starts.push_back(pi);
  starts.push_back(z.cwiseInverse());
  starts.push_back(Vec::Ones(z.size()));

  double best = std::numeric_limits<double>::quiet_NaN();
  Vec best_pi;
  for (const Vec& start : starts) {
    Vec p = start;
    bool ok = true;
    double f = objective(p, ok);
    if (!ok) continue;
    bool certified = false;
    for (int it = 0; it < 200; ++it) {
      Mat a = d.precision(p);
      Eigen::LLT<Mat> llt(a);
      Mat ainv = llt.solve(Mat::Identity(a.rows(), a.cols()));
      Mat bab = d.b * ainv * d.b.transpose();
      const Vec grad = z - bab.diagonal();
      if (grad.lpNorm<Eigen::Infinity>() < gtol) {
        certified = true;
        break;
      }
      Mat hess = bab.cwiseProduct(bab);
      hess.diagonal().array() += 1e-12 * (1.0 + hess.diagonal().maxCoeff());
      Vec step = hess.ldlt().solve(-grad);
      double slope = grad.dot(step);
      if (slope >= 0.0) {
        step = -grad;
        slope = -grad.squaredNorm();
      }
      bool moved = false;
      double t = 1.0;
      for (int ls = 0; ls < 80 && !moved; ++ls) {
        Vec pc = p + t * step;
        bool okc = true;
        const double fc = objective(pc, okc);
        if (okc && fc <= f + 1e-4 * t * slope) {
          p = pc;
          f = fc;
          moved = true;
        }
        t *= 0.5;
      }
      if (!moved) {
        t = 1.0 / (1.0 + grad.norm());
        for (int ls = 0; ls < 80 && !moved; ++ls) {
          Vec pc = p - t * grad;
          bool okc = true;
          const double fc = objective(pc, okc);
          if (okc && fc < f - 1e-15 * (1.0 + std::fabs(f))) {
            p = pc;
            f = fc;
            moved = true;
          }
          t *= 0.5;
        }
        if (!moved) break;
      }
    }
    if (certified && (std::isnan(best) || f < best)) {
      best = f;
      best_pi = p;
    }
  }
  if (!std::isnan(best)) pi = best_pi;
  return best;
}

// Geometric continuation from an attainable variance vector; each leg
// warm-starts the next, which tames the stiff near-singular valley that
// appears when z exceeds the variances at moderate pi. NaN if even that
// fails.
double gstar_continuation(const DenseModel& d, const Vec& z, Vec& pi) {
  const Vec z_base = d.var_diag(Vec::Ones(z.size()));
  const int legs = 16;
  pi = Vec::Ones(z.size());
  double g = std::numeric_limits<double>::quiet_NaN();
  for (int leg = 1; leg <= legs; ++leg) {
    const double t = double(leg) / legs;
    const Vec zt =
        (z_base.array().log() * (1.0 - t) + z.array().log() * t).exp();
    g = gstar_newton_impl(d, zt, pi);
    if (std::isnan(g)) return g;
  }
  return g;
}

}  // namespace

double gstar_by_newton(const ModelSpec& model, const Vec& z, Vec* pi_hat) {
  const DenseModel d = densify(model);
  Vec pi = z.cwiseInverse();
  double g = gstar_newton_impl(d, z, pi);
  if (std::isnan(g)) g = gstar_continuation(d, z, pi);
  if (std::isnan(g))
    throw std::runtime_error("gstar_by_newton: optimizer failure");
  if (pi_hat) *pi_hat = pi;
  return g;
}

double max_theta_coupled(const ModelSpec& model, const TildeParams& tt,
                         unsigned seed, int restarts) {
  const DenseModel d = densify(model);
  const Eigen::Index q = model.q();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> un(0.0, 1.0);
  double best = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Vec pi(q), bb(q);
    for (Eigen::Index i = 0; i < q; ++i) {
      pi[i] = (0.05 + 0.45 * un(rng)) * tt.pi_tilde[i] / d.eta;
      bb[i] = r == 0 ? 0.0 : un(rng) - 0.5;
    }
    best = std::max(best, ascend_theta(d, tt, pi, bb, 3000));
  }
  return best;
}

SaddleValues saddle_brute(const ModelSpec& model, unsigned seed, int restarts) {
  model.validate();
  const DenseModel d = densify(model);
  const Eigen::Index q = model.q(), n = model.n();

  {
    Mat xtx = d.x.transpose() * d.x / d.nv;
    Eigen::SelfAdjointEigenSolver<Mat> es(xtx);
    if (es.eigenvalues().minCoeff() <
        1e-10 * std::max(1.0, es.eigenvalues().maxCoeff()))
      throw std::invalid_argument("saddle_brute: near-singular design");
  }

  // theta~ held fixed throughout: marginals at pi = 1.
  const Vec z0 = d.var_diag(Vec::Ones(q));
  Mat a0 = d.precision(Vec::Ones(q));
  const Vec u0 = a0.ldlt().solve(d.x.transpose() * d.y / d.nv);
  TildeParams tt = moments_to_natural(d.b * u0, z0);

  SaddleValues sv;
  sv.maxmin = max_theta_coupled(model, tt, seed, restarts);

  // minmax: F(v) = |y-Xu|^2/nv - sum_i psi_i(s_i; z_i) - g*(z) + const,
  // with psi_i profiled by grid + Newton polish on quadrature moments.
  Vec warm_pi = Vec::Ones(q) * 0.5, warm_b = Vec::Zero(q);
  Vec warm_pi_hat = z0.cwiseInverse();
  const double cap_mult = (1.0 - kCavityFloor) / d.eta;

  auto site_min = [&](double s, double zi, Eigen::Index i, double& pi_i,
                      double& b_i, bool allow_grid) -> double {
    (void)allow_grid;
    const double pt = tt.pi_tilde[i], bt = tt.b_tilde[i];
    const double cap = cap_mult * pt;
    const auto& site = (*d.sites)[size_t(i)];
    auto moments = [&](double p, double b, TiltedMoments& tm) -> bool {
      const double pm = pt - d.eta * p;
      if (!(pm > kCavityFloor * pt)) return false;
      tm = quad_tilted(pm, bt - d.eta * b, site, d.eta, kQuadTol);
      return true;
    };
    auto psi_val = [&](double p, double b) -> double {
      TiltedMoments tm;
      if (!moments(p, b, tm)) return std::numeric_limits<double>::quiet_NaN();
      return -(zi + s * s) * p + 2.0 * b * s + (2.0 / d.eta) * tm.log_zhat;
    };
    // 1-d solve of the mean condition at fixed p; the tilted mean is
    // strictly decreasing in b, so an expanding bracket plus bisection is
    // exact. Returns the residual of the second-moment condition.
    auto solve_b = [&](double p, double& b, TiltedMoments& tm) -> double {
      TiltedMoments t0;
      if (!moments(p, b, t0)) {
        b = 0.0;
        if (!moments(p, b, t0)) return std::numeric_limits<double>::quiet_NaN();
      }
      double b1 = b, b2 = b;
      double r1 = t0.mean - s, r2 = r1;
      double span = 1.0 + std::fabs(b);
      for (int it = 0; it < 120 && r1 <= 0.0; ++it) {
        b1 -= span;
        span *= 2.0;
        TiltedMoments t;
        if (!moments(p, b1, t)) return std::numeric_limits<double>::quiet_NaN();
        r1 = t.mean - s;
      }
      span = 1.0 + std::fabs(b);
      for (int it = 0; it < 120 && r2 >= 0.0; ++it) {
        b2 += span;
        span *= 2.0;
        TiltedMoments t;
        if (!moments(p, b2, t)) return std::numeric_limits<double>::quiet_NaN();
        r2 = t.mean - s;
      }
      if (!(r1 >= 0.0 && r2 <= 0.0))
        return std::numeric_limits<double>::quiet_NaN();
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (b1 + b2);
        TiltedMoments t;
        if (!moments(p, mid, t)) return std::numeric_limits<double>::quiet_NaN();
        b = mid;
        tm = t;
        const double rm = t.mean - s;
        if (std::fabs(rm) <= 1e-11 * (1.0 + std::fabs(s))) break;
        (rm > 0.0 ? b1 : b2) = mid;
      }
      return tm.second_moment - (zi + s * s);
    };

    // Fast path: warm-started damped Newton on the 2-d system.
    double p = std::min(std::max(pi_i, 0.0), cap * 0.999);
    double b = b_i;
    TiltedMoments tm;
    if (!moments(p, b, tm)) {
      p = 0.25 * cap;
      b = 0.0;
    }
    for (int it = 0; it < 60; ++it) {
      if (!moments(p, b, tm)) break;
      const double r1 = tm.mean - s;
      const double r2 = tm.second_moment - (zi + s * s);
      if (std::fabs(r1) < 1e-11 * (1.0 + std::fabs(s)) &&
          std::fabs(r2) < 1e-11 * (1.0 + zi + s * s))
        break;
      const double hp = 1e-6 * (1.0 + std::fabs(p));
      const double hb = 1e-6 * (1.0 + std::fabs(b));
      TiltedMoments tph, tpl, tbh, tbl;
      const double ph = std::min(p + hp, cap), pl = std::max(p - hp, 0.0);
      if (!moments(ph, b, tph) || !moments(pl, b, tpl) ||
          !moments(p, b + hb, tbh) || !moments(p, b - hb, tbl))
        break;
      const double j11 = (tph.mean - tpl.mean) / (ph - pl);
      const double j12 = (tbh.mean - tbl.mean) / (2.0 * hb);
      const double j21 = (tph.second_moment - tpl.second_moment) / (ph - pl);
      const double j22 = (tbh.second_moment - tbl.second_moment) / (2.0 * hb);
      const double det = j11 * j22 - j12 * j21;
      if (std::fabs(det) < 1e-300) break;
      const double dp = -(j22 * r1 - j12 * r2) / det;
      const double db = -(-j21 * r1 + j11 * r2) / det;
      double t = 1.0;
      bool moved = false;
      for (int h = 0; h < 50; ++h) {
        const double pc = std::min(std::max(p + t * dp, 0.0), cap * 0.9999);
        const double bc = b + t * db;
        TiltedMoments tc;
        if (moments(pc, bc, tc)) {
          const double rr =
              std::max(std::fabs(tc.mean - s),
                       std::fabs(tc.second_moment - (zi + s * s)));
          if (rr < std::max(std::fabs(r1), std::fabs(r2))) {
            p = pc;
            b = bc;
            moved = true;
            break;
          }
        }
        t *= 0.5;
      }
      if (!moved) break;
    }

    auto certified = [&](double pp, double bb) -> bool {
      TiltedMoments tf;
      if (!moments(pp, bb, tf)) return false;
      const double r1 = tf.mean - s;
      const double r2 = tf.second_moment - (zi + s * s);
      const double tol1 = 1e-8 * (1.0 + std::fabs(s));
      const double tol2 = 1e-8 * (1.0 + zi + s * s);
      if (std::fabs(r1) > tol1) return false;
      if (pp <= 1e-12) return r2 >= -tol2;
      if (pp >= cap * 0.998) return r2 <= tol2;
      return std::fabs(r2) <= tol2;
    };

    if (!certified(p, b)) {
      // Robust path: nested bisection. The profiled psi is convex in p, so
      // the second-moment residual after the b-solve is nondecreasing in p.
      double b_lo = b, b_hi = b;
      TiltedMoments t_lo, t_hi;
      const double g0 = solve_b(0.0, b_lo, t_lo);
      if (std::isnan(g0)) return std::numeric_limits<double>::quiet_NaN();
      if (g0 >= 0.0) {
        p = 0.0;
        b = b_lo;
      } else {
        const double g1 = solve_b(cap * 0.999, b_hi, t_hi);
        if (std::isnan(g1)) return std::numeric_limits<double>::quiet_NaN();
        if (g1 <= 0.0) {
          p = cap * 0.999;
          b = b_hi;
        } else {
          double lo = 0.0, hi = cap * 0.999;
          for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            double bm = b;
            TiltedMoments t;
            const double gm = solve_b(mid, bm, t);
            if (std::isnan(gm)) return std::numeric_limits<double>::quiet_NaN();
            p = mid;
            b = bm;
            if (std::fabs(gm) <= 1e-11 * (1.0 + zi + s * s)) break;
            (gm < 0.0 ? lo : hi) = mid;
            if (hi - lo < 1e-15 * (1.0 + mid)) break;
          }
        }
      }
      if (!certified(p, b)) return std::numeric_limits<double>::quiet_NaN();
    }
    pi_i = p;
    b_i = b;
    return psi_val(p, b);
  };

  auto f_of_v = [&](const Vec& z, const Vec& u, Vec* gz, Vec* gu,
                    bool allow_grid) -> double {
    const Vec s = d.b * u;
    double f = (d.y - d.x * u).squaredNorm() / d.nv;
    Vec pis(q), bs(q);
    for (Eigen::Index i = 0; i < q; ++i) {
      double pi_i = warm_pi[i], b_i = warm_b[i];
      const double psi = site_min(s[i], z[i], i, pi_i, b_i, allow_grid);
      if (std::isnan(psi)) return std::numeric_limits<double>::quiet_NaN();
      f -= psi;
      pis[i] = pi_i;
      bs[i] = b_i;
      warm_pi[i] = pi_i;
      warm_b[i] = b_i;
    }
    Vec pi_hat = warm_pi_hat;
    double gst = gstar_newton_impl(d, z, pi_hat);
    if (std::isnan(gst)) gst = gstar_continuation(d, z, pi_hat);
    if (std::isnan(gst)) return std::numeric_limits<double>::quiet_NaN();
    f -= gst;
    warm_pi_hat = pi_hat;
    f += d.lz_const;
    if (gu)
      *gu = 2.0 * d.x.transpose() * (d.x * u - d.y) / d.nv +
            2.0 * d.b.transpose() * (pis.cwiseProduct(s) - bs);
    if (gz) *gz = pis - pi_hat;
    return f;
  };

  // Feasibility: g*(z) is -inf off the closure of the achievable-variance
  // set {diag(B M B') : M spd}, which for q > n(n+1)/2 is a measure-zero
  // manifold in R^q. The minimization is therefore parameterized by the
  // Cholesky factor of M (plus u), which keeps every probe feasible.
  const Eigen::Index nn = n;
  Mat m0 = d.precision(Vec::Ones(q));
  Mat l0 = Eigen::LLT<Mat>(m0.inverse()).matrixL();
  const double u_cap = 50.0 * (1.0 + u0.cwiseAbs().maxCoeff());

  auto z_of = [&](const Mat& l) -> Vec {
    Vec z(q);
    for (Eigen::Index i = 0; i < q; ++i)
      z[i] = (l.transpose() * d.b.row(i).transpose()).squaredNorm();
    return z;
  };

  std::mt19937_64 rng(seed + 17);
  std::normal_distribution<double> gn;
  double best_minmax = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Mat l = l0;
    if (r > 0)
      for (Eigen::Index i = 0; i < nn; ++i)
        for (Eigen::Index j = 0; j <= i; ++j)
          l(i, j) *= 1.0 + 0.2 * gn(rng);
    Vec u = u0;
    Vec gz(q), gu(nn);
    auto eval = [&](const Mat& ll, const Vec& uu, Vec& gzv, Vec& guv,
                    Mat& glv, bool grid) -> double {
      const double f = f_of_v(z_of(ll), uu, &gzv, &guv, grid);
      if (std::isnan(f)) return f;
      // chain rule: dF/dM = B' diag(gz) B, dF/dL = 2 (dF/dM) L
      glv = 2.0 * d.b.transpose() * gzv.asDiagonal() * d.b * ll;
      glv = glv.triangularView<Eigen::Lower>();
      return f;
    };
    Mat gl(nn, nn), glc(nn, nn);
    double f = eval(l, u, gz, gu, gl, true);
    if (std::isnan(f)) continue;
    double t = 1e-2;
    Mat lp = l, glp = gl;
    Vec up = u, gup = gu;
    int flat_count = 0;
    for (int it = 0; it < 1200 && flat_count < 8; ++it) {
      const double gn2 = gl.squaredNorm() + gu.squaredNorm();
      if (std::sqrt(gn2) < 1e-10 * (1.0 + std::fabs(f))) break;
      bool moved = false;
      double step = std::min(t, 1e2);
      for (int ls = 0; ls < 60; ++ls) {
        Mat lc = l - step * gl;
        Vec uc = (u - step * gu).cwiseMax(-u_cap).cwiseMin(u_cap);
        Vec gzc(q), guc(nn);
        const double fc = eval(lc, uc, gzc, guc, glc, false);
        if (std::isfinite(fc) && fc < f - 1e-8 * step * gn2 &&
            fc > f - 1e3 * (1.0 + std::fabs(f))) {
          if (f - fc < 1e-13 * (1.0 + std::fabs(f))) {
            ++flat_count;
          } else {
            flat_count = 0;
          }
          lp = l;
          up = u;
          glp = gl;
          gup = gu;
          l = lc;
          u = uc;
          gl = glc;
          gu = guc;
          f = fc;
          moved = true;
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;
      const double num = (l - lp).squaredNorm() + (u - up).squaredNorm();
      const double den =
          ((l - lp).array() * (gl - glp).array()).sum() + (u - up).dot(gu - gup);
      t = den > 1e-300 ? std::min(num / den, 1e2) : step * 2.0;
    }
    best_minmax = std::min(best_minmax, f);
  }
  sv.minmax = best_minmax;
  return sv;
}

}  // namespace oracle
}  // namespace epinf
