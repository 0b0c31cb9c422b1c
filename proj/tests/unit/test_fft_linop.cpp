#include <doctest.h>

#include <initializer_list>
#include <random>

#include "epinf/linop.hpp"

using namespace epinf;

namespace {

std::mt19937_64 rng(42);

Vec randn(Eigen::Index n) {
  std::normal_distribution<double> gn;
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = gn(rng);
  return v;
}

// 20 random pairs, rel error < 1e-10.
void check_adjoint(const LinOp& op) {
  for (int t = 0; t < 20; ++t) {
    const Vec v = randn(op.cols());
    const Vec w = randn(op.rows());
    const double lhs = op.apply(v).dot(w);
    const double rhs = v.dot(op.apply_adjoint(w));
    CHECK(std::fabs(lhs - rhs) <= 1e-10 * std::max(1.0, std::fabs(lhs)));
  }
}

void check_dense_agrees(const LinOp& op) {
  const auto dense = op.materialize_dense();
  if (!dense) return;
  Vec e = Vec::Zero(op.cols());
  for (Eigen::Index j = 0; j < op.cols(); ++j) {
    e[j] = 1.0;
    CHECK((op.apply(e) - dense->col(j)).lpNorm<Eigen::Infinity>() < 1e-12);
    e[j] = 0.0;
  }
}

}  // namespace

TEST_CASE("fft roundtrip and unitarity at assorted lengths") {
  for (int n : {1, 2, 8, 48, 64, 73, 100}) {
    Cvec a(n);
    std::normal_distribution<double> gn;
    for (auto& c : a) c = {gn(rng), gn(rng)};
    Cvec b = a;
    fft(b, -1);
    double pa = 0.0, pb = 0.0;
    for (int i = 0; i < n; ++i) pa += std::norm(a[i]);
    for (int i = 0; i < n; ++i) pb += std::norm(b[i]);
    CHECK(pb / n == doctest::Approx(pa).epsilon(1e-11));  // Parseval
    fft(b, +1);
    for (int i = 0; i < n; ++i) {
      CHECK(b[i].real() == doctest::Approx(a[i].real()).epsilon(1e-10));
      CHECK(b[i].imag() == doctest::Approx(a[i].imag()).epsilon(1e-10));
    }
  }
}

TEST_CASE("real-coded spectrum layout is orthonormal") {
  for (auto [h, w] : {std::pair{4, 4}, {8, 8}, {6, 10}, {3, 5}, {1, 8}}) {
    SpectrumLayout layout(h, w);
    const Vec img = randn(h * w);
    const Vec coded = layout.forward(img);
    CHECK(coded.norm() == doctest::Approx(img.norm()).epsilon(1e-12));
    const Vec back = layout.inverse(coded);
    CHECK((back - img).lpNorm<Eigen::Infinity>() < 1e-10);
  }
}

TEST_CASE("dense_op examples") {
  Mat id2 = Mat::Identity(2, 2);
  auto op = dense_op(id2);
  Vec v(2);
  v << 1, 2;
  CHECK((op->apply(v) - v).norm() == 0.0);

  Mat perm(2, 2);
  perm << 0, 1, 1, 0;
  auto p = dense_op(perm);
  Vec want(2);
  want << 2, 1;
  CHECK((p->apply(v) - want).norm() == 0.0);

  Mat m = Mat::Random(3, 2);
  check_adjoint(*dense_op(m));
  CHECK_THROWS(dense_op(m)->apply(randn(3)));
}

TEST_CASE("dft_blur_op: delta kernel acts as identity") {
  const int h = 8, w = 8;
  Vec delta = Vec::Zero(1);
  delta[0] = 1.0;
  const Vec spec = kernel_image_to_spectrum(delta, 1, 1, h, w);
  auto op = dft_blur_op(spec, h, w);
  const Vec img = randn(h * w);
  // apply = spectral multiply by the flat spectrum after the coded DFT
  SpectrumLayout layout(h, w);
  CHECK((op->apply(img) - layout.forward(img)).lpNorm<Eigen::Infinity>() <
        1e-10);
  check_adjoint(*op);
}

TEST_CASE("dft_blur_op: normalized blur preserves a constant image") {
  const int h = 8, w = 8;
  Vec k = randn(9).cwiseAbs();
  k /= k.sum();
  const Vec spec = kernel_image_to_spectrum(k, 3, 3, h, w);
  auto op = dft_blur_op(spec, h, w);
  const Vec ones = Vec::Ones(h * w);
  // DC preservation: blurred constant = same constant, compared in coding
  SpectrumLayout layout(h, w);
  const Vec coded = op->apply(ones);
  CHECK((coded - layout.forward(ones)).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("dft_blur_op matches dense circular convolution") {
  const int h = 8, w = 8;
  Vec k = randn(9);
  const Vec spec = kernel_image_to_spectrum(k, 3, 3, h, w);
  auto op = dft_blur_op(spec, h, w);
  // dense circulant: out[(y,x)] = sum_k k[(ky,kx)] img[(y-(ky-1))%h, ...]
  Mat circ = Mat::Zero(h * w, h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int sy = ((y - (ky - 1)) % h + h) % h;
          const int sx = ((x - (kx - 1)) % w + w) % w;
          circ(y * w + x, sy * w + sx) += k[ky * 3 + kx];
        }
  SpectrumLayout layout(h, w);
  const Vec img = randn(h * w);
  const Vec via_op = layout.inverse(op->apply(img));
  const Vec via_dense = circ * img;
  CHECK((via_op - via_dense).lpNorm<Eigen::Infinity>() <
        1e-10 * (1.0 + via_dense.lpNorm<Eigen::Infinity>()));
  check_adjoint(*op);
}

TEST_CASE("subsampled_dft_op: full sampling is orthonormal") {
  const int h = 4, w = 8;
  std::vector<int> all(h * w);
  for (int i = 0; i < h * w; ++i) all[i] = i;
  auto op = subsampled_dft_op(h, w, all);
  const Vec v = randn(h * w);
  CHECK((op->apply_adjoint(op->apply(v)) - v).lpNorm<Eigen::Infinity>() <
        1e-10);
  check_adjoint(*op);
  CHECK_THROWS(subsampled_dft_op(h, w, {}));
  CHECK_THROWS(subsampled_dft_op(h, w, {h * w}));
}

TEST_CASE("phase encodes: 16 of 64 columns give m = 1024") {
  const auto rows = phase_encode_rows(64, 64, {0, 1, 63, 2, 62, 3, 61, 4, 60,
                                               8, 56, 16, 48, 24, 40, 32});
  CHECK(rows.size() == 1024);
  auto op = subsampled_dft_op(64, 64, rows);
  CHECK(op->rows() == 1024);
  CHECK(op->cols() == 4096);
}

TEST_CASE("diff_op examples") {
  auto op = diff_op(4, 4);
  CHECK(op->rows() == 32);
  CHECK((op->apply(Vec::Ones(16))).lpNorm<Eigen::Infinity>() == 0.0);

  auto row = diff_op(1, 2);
  Vec v(2);
  v << 3.0, 5.0;
  const Vec d = row->apply(v);
  CHECK(d[0] == doctest::Approx(2.0));   // b - a
  CHECK(d[1] == doctest::Approx(-2.0));  // a - b

  // random 4x4 matches the materialized dense matrix
  const Mat dense = op->to_dense();
  const Vec x = randn(16);
  CHECK(((dense * x) - op->apply(x)).lpNorm<Eigen::Infinity>() < 1e-12);
  check_adjoint(*op);
}

TEST_CASE("wavelet_op: orthonormality, vanishing moments, inverse") {
  auto op = wavelet_op(8, 8, 3);
  const Vec v = randn(64);
  CHECK(op->apply(v).norm() == doctest::Approx(v.norm()).epsilon(1e-12));
  CHECK((op->apply_adjoint(op->apply(v)) - v).lpNorm<Eigen::Infinity>() <
        1e-12);
  // constant image: only the coarsest scaling coefficient survives
  const Vec flat = op->apply(Vec::Ones(64));
  int nonzero = 0;
  for (Eigen::Index i = 0; i < 64; ++i)
    if (std::fabs(flat[i]) > 1e-10) ++nonzero;
  CHECK(nonzero == 1);
  check_adjoint(*op);
  CHECK_THROWS(wavelet_op(6, 8, 2));
}

TEST_CASE("stacked_op has q = 3n rows and concatenates applies") {
  const int h = 8, w = 8;
  auto wav = wavelet_op(h, w, 2);
  auto dif = diff_op(h, w);
  auto st = stacked_op({wav, dif});
  CHECK(st->rows() == 3 * h * w);
  const Vec v = randn(h * w);
  const Vec out = st->apply(v);
  CHECK((out.head(h * w) - wav->apply(v)).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((out.tail(2 * h * w) - dif->apply(v)).lpNorm<Eigen::Infinity>() == 0.0);
  check_adjoint(*st);
  check_dense_agrees(*st);
}
