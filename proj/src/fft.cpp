#include "epinf/fft.hpp"

#include <cmath>
#include <stdexcept>

namespace epinf {

namespace {

bool is_pow2(size_t n) { return n && !(n & (n - 1)); }

void fft_pow2(Cvec& a, int sign) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * M_PI / double(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Bluestein chirp-z for arbitrary n, built on the radix-2 kernel.
void fft_bluestein(Cvec& a, int sign) {
  const size_t n = a.size();
  size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  Cvec chirp(n);
  for (size_t k = 0; k < n; ++k) {
    // angle = sign * pi * k^2 / n, k^2 reduced mod 2n to keep precision
    const size_t k2 = (k * k) % (2 * n);
    const double ang = sign * M_PI * double(k2) / double(n);
    chirp[k] = {std::cos(ang), std::sin(ang)};
  }
  Cvec fa(m, {0.0, 0.0}), fb(m, {0.0, 0.0});
  for (size_t k = 0; k < n; ++k) fa[k] = a[k] * chirp[k];
  fb[0] = std::conj(chirp[0]);
  for (size_t k = 1; k < n; ++k) fb[k] = fb[m - k] = std::conj(chirp[k]);
  fft_pow2(fa, -1);
  fft_pow2(fb, -1);
  for (size_t k = 0; k < m; ++k) fa[k] *= fb[k];
  fft_pow2(fa, +1);
  for (size_t k = 0; k < m; ++k) fa[k] /= double(m);
  for (size_t k = 0; k < n; ++k) a[k] = fa[k] * chirp[k];
}

}  // namespace

void fft(Cvec& a, int sign) {
  const size_t n = a.size();
  if (n <= 1) return;
  if (is_pow2(n)) {
    fft_pow2(a, sign);
  } else {
    fft_bluestein(a, sign);
  }
  if (sign > 0) {
    for (auto& v : a) v /= double(n);
  }
}

SpectrumLayout::SpectrumLayout(int h, int w) : h_(h), w_(w) {
  if (h <= 0 || w <= 0) throw std::invalid_argument("SpectrumLayout: bad dims");
  const int n = h * w;
  self_.assign(n, 0);
  re_slot_.assign(n, -1);
  conj_bin_.resize(n);
  slots_.reserve(n);
  for (int ky = 0; ky < h; ++ky) {
    for (int kx = 0; kx < w; ++kx) {
      const int bin = ky * w + kx;
      const int cy = (h - ky) % h, cx = (w - kx) % w;
      const int cbin = cy * w + cx;
      conj_bin_[bin] = cbin;
      if (cbin == bin) {
        self_[bin] = 1;
        re_slot_[bin] = int(slots_.size());
        slots_.push_back({bin, false});
      } else if (bin < cbin) {
        re_slot_[bin] = int(slots_.size());
        slots_.push_back({bin, false});
        slots_.push_back({bin, true});
      }
    }
  }
  if (int(slots_.size()) != n)
    throw std::logic_error("SpectrumLayout: slot count mismatch");
}

void SpectrumLayout::dft2d(Cvec& grid, int sign) const {
  Cvec row(w_), col(h_);
  for (int y = 0; y < h_; ++y) {
    for (int x = 0; x < w_; ++x) row[x] = grid[y * w_ + x];
    fft(row, sign);
    for (int x = 0; x < w_; ++x) grid[y * w_ + x] = row[x];
  }
  for (int x = 0; x < w_; ++x) {
    for (int y = 0; y < h_; ++y) col[y] = grid[y * w_ + x];
    fft(col, sign);
    for (int y = 0; y < h_; ++y) grid[y * w_ + x] = col[y];
  }
}

Eigen::VectorXd SpectrumLayout::forward(
    const Eigen::Ref<const Eigen::VectorXd>& img) const {
  const int n = h_ * w_;
  if (img.size() != n) throw std::invalid_argument("forward: length mismatch");
  Cvec grid(n);
  for (int i = 0; i < n; ++i) grid[i] = {img[i], 0.0};
  dft2d(grid, -1);
  const double scale = 1.0 / std::sqrt(double(n));  // unitary
  Eigen::VectorXd out(n);
  const double r2 = M_SQRT2;
  for (int s = 0; s < n; ++s) {
    const auto& sl = slots_[s];
    const auto v = grid[sl.bin] * scale;
    if (self_[sl.bin]) {
      out[s] = v.real();
    } else {
      out[s] = (sl.is_imag ? v.imag() : v.real()) * r2;
    }
  }
  return out;
}

Cvec SpectrumLayout::unpack(
    const Eigen::Ref<const Eigen::VectorXd>& coded) const {
  const int n = h_ * w_;
  if (coded.size() != n) throw std::invalid_argument("unpack: length mismatch");
  Cvec spec(n, {0.0, 0.0});
  const double inv_r2 = M_SQRT1_2;
  for (int s = 0; s < n; ++s) {
    const auto& sl = slots_[s];
    if (self_[sl.bin]) {
      spec[sl.bin] = {coded[s], 0.0};
    } else if (!sl.is_imag) {
      const double re = coded[s] * inv_r2;
      const double im = coded[s + 1] * inv_r2;
      spec[sl.bin] = {re, im};
      spec[conj_bin_[sl.bin]] = {re, -im};
    }
  }
  return spec;
}

Eigen::VectorXd SpectrumLayout::pack(const Cvec& spec) const {
  const int n = h_ * w_;
  Eigen::VectorXd out(n);
  const double r2 = M_SQRT2;
  for (int s = 0; s < n; ++s) {
    const auto& sl = slots_[s];
    if (self_[sl.bin]) {
      out[s] = spec[sl.bin].real();
    } else {
      out[s] = (sl.is_imag ? spec[sl.bin].imag() : spec[sl.bin].real()) * r2;
    }
  }
  return out;
}

Eigen::VectorXd SpectrumLayout::inverse(
    const Eigen::Ref<const Eigen::VectorXd>& coded) const {
  const int n = h_ * w_;
  Cvec grid = unpack(coded);
  dft2d(grid, +1);
  const double scale = std::sqrt(double(n));  // undo unitary scaling
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) out[i] = grid[i].real() * scale;
  return out;
}

}  // namespace epinf
