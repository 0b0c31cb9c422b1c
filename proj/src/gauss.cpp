#include "epinf/gauss.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Cholesky>

namespace epinf {

namespace {

Mat assemble_precision(const ModelSpec& model, const SiteParams& th) {
  const Eigen::Index n = model.n();
  if (n > kDenseSizeCap)
    throw std::invalid_argument("gauss: n exceeds dense backend cap");
  if (th.pi.size() != model.q())
    throw std::invalid_argument("gauss: pi length != q");
  const double inv_nv = 1.0 / model.noise_var;
  Mat a(n, n);
  Vec e = Vec::Zero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    e[j] = 1.0;
    Vec xe = model.X->apply(e);
    Vec be = model.B->apply(e);
    a.col(j) = inv_nv * model.X->apply_adjoint(xe) +
               model.B->apply_adjoint(th.pi.cwiseProduct(be));
    e[j] = 0.0;
  }
  a = 0.5 * (a + a.transpose()).eval();
  return a;
}

// Unblocked Cholesky used only to locate the failing pivot for error
// reporting.
Eigen::Index find_bad_pivot(const Mat& a) {
  Mat l = a;
  const Eigen::Index n = a.rows();
  for (Eigen::Index k = 0; k < n; ++k) {
    double d = l(k, k);
    for (Eigen::Index j = 0; j < k; ++j) d -= l(k, j) * l(k, j);
    if (!(d > 0.0)) return k;
    l(k, k) = std::sqrt(d);
    for (Eigen::Index i = k + 1; i < n; ++i) {
      double v = l(i, k);
      for (Eigen::Index j = 0; j < k; ++j) v -= l(i, j) * l(k, j);
      l(i, k) = v / l(k, k);
    }
  }
  return -1;
}

}  // namespace

GaussFactor build_precision(const ModelSpec& model, const SiteParams& th) {
  Mat a = assemble_precision(model, th);
  Eigen::LLT<Mat> llt(a);
  if (llt.info() != Eigen::Success) {
    const Eigen::Index pivot = find_bad_pivot(a);
    throw std::runtime_error("build_precision: factorization failed at pivot " +
                             std::to_string(pivot));
  }
  return {Mat(llt.matrixL())};
}

Vec posterior_mean(const ModelSpec& model, const SiteParams& th,
                   const GaussFactor& f) {
  Vec rhs = model.X->apply_adjoint(model.y) / model.noise_var +
            model.B->apply_adjoint(th.b);
  Vec u = f.L.triangularView<Eigen::Lower>().solve(rhs);
  return f.L.triangularView<Eigen::Lower>().transpose().solve(u);
}

Vec marginal_variances(const ModelSpec& model, const GaussFactor& f) {
  const Eigen::Index n = f.n();
  Mat linv = f.L.triangularView<Eigen::Lower>().solve(Mat::Identity(n, n));
  Mat ainv = linv.transpose() * linv;
  Vec z = Vec::Zero(model.q());
  Vec e = Vec::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    e[i] = 1.0;
    z += model.B->apply(ainv.col(i)).cwiseProduct(model.B->apply(e));
    e[i] = 0.0;
  }
  return z;
}

double log_det(const GaussFactor& f) {
  return 2.0 * f.L.diagonal().array().log().sum();
}

double quad_form_r(const ModelSpec& model, const SiteParams& th, const Vec& u) {
  Vec r = model.y - model.X->apply(u);
  Vec s = model.B->apply(u);
  return r.squaredNorm() / model.noise_var +
         s.cwiseProduct(th.pi).dot(s) - 2.0 * th.b.dot(s);
}

double log_zq_constant(const ModelSpec& model) {
  return double(model.m()) * std::log(2.0 * M_PI * model.noise_var) -
         double(model.n()) * std::log(2.0 * M_PI);
}

double log_zq(const ModelSpec& model, const SiteParams& th,
              const GaussFactor& f, const Vec& u_star) {
  const double m2 =
      log_det(f) + quad_form_r(model, th, u_star) + log_zq_constant(model);
  return -0.5 * m2;
}

GaussState build_gauss_state(const ModelSpec& model, const SiteParams& th) {
  const Eigen::Index n = model.n();
  Mat a = assemble_precision(model, th);
  Eigen::LLT<Mat> llt(std::move(a));
  if (llt.info() != Eigen::Success) {
    const Eigen::Index pivot = find_bad_pivot(assemble_precision(model, th));
    throw std::runtime_error("build_gauss_state: factorization failed at pivot " +
                             std::to_string(pivot));
  }
  GaussState st;
  st.chol = llt.matrixL();
  st.logdet = 2.0 * st.chol.diagonal().array().log().sum();

  Vec rhs = model.X->apply_adjoint(model.y) / model.noise_var +
            model.B->apply_adjoint(th.b);
  st.u_star = llt.solve(rhs);

  Mat linv = st.chol.triangularView<Eigen::Lower>().solve(Mat::Identity(n, n));
  Mat ainv(n, n);
  ainv.noalias() = linv.transpose() * linv;
  st.diag_ainv = ainv.diagonal();
  st.z = Vec::Zero(model.q());
  Vec e = Vec::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    e[i] = 1.0;
    st.z += model.B->apply(ainv.col(i)).cwiseProduct(model.B->apply(e));
    e[i] = 0.0;
  }
  if ((st.z.array() <= 0.0).any())
    throw std::runtime_error("build_gauss_state: nonpositive marginal variance");

  st.log_zq = -0.5 * (st.logdet + quad_form_r(model, th, st.u_star) +
                      log_zq_constant(model));
  st.pi_at_z = th.pi;
  st.gstar = st.z.dot(th.pi) - st.logdet;
  return st;
}

std::pair<Vec, double> refresh_dual(const GaussState& state) {
  return {state.z, state.gstar};
}

}  // namespace epinf
