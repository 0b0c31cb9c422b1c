#include "epinf/linop.hpp"

#include <cmath>
#include <stdexcept>

namespace epinf {

void LinOp::check_apply(Eigen::Index got) const {
  if (got != cols())
    throw std::invalid_argument("LinOp::apply: expected length " +
                                std::to_string(cols()) + ", got " +
                                std::to_string(got));
}

void LinOp::check_adjoint(Eigen::Index got) const {
  if (got != rows())
    throw std::invalid_argument("LinOp::apply_adjoint: expected length " +
                                std::to_string(rows()) + ", got " +
                                std::to_string(got));
}

Mat LinOp::to_dense() const {
  if (auto d = materialize_dense()) return *d;
  Mat m(rows(), cols());
  Vec e = Vec::Zero(cols());
  for (Eigen::Index j = 0; j < cols(); ++j) {
    e[j] = 1.0;
    m.col(j) = apply(e);
    e[j] = 0.0;
  }
  return m;
}

namespace {

class DenseOp final : public LinOp {
 public:
  explicit DenseOp(Mat m) : m_(std::move(m)) {
    if (!m_.allFinite()) throw std::invalid_argument("dense_op: non-finite");
  }
  Eigen::Index rows() const override { return m_.rows(); }
  Eigen::Index cols() const override { return m_.cols(); }
  Vec apply(const Eigen::Ref<const Vec>& v) const override {
    check_apply(v.size());
    return m_ * v;
  }
  Vec apply_adjoint(const Eigen::Ref<const Vec>& v) const override {
    check_adjoint(v.size());
    return m_.transpose() * v;
  }
  std::optional<Mat> materialize_dense() const override { return m_; }

 private:
  Mat m_;
};

class DftBlurOp final : public LinOp {
 public:
  DftBlurOp(const Vec& spectrum, int h, int w) : layout_(h, w) {
    if (spectrum.size() != layout_.n())
      throw std::invalid_argument("dft_blur_op: spectrum length mismatch");
    mult_ = layout_.unpack_multiplier(spectrum);
  }
  Eigen::Index rows() const override { return layout_.n(); }
  Eigen::Index cols() const override { return layout_.n(); }
  Vec apply(const Eigen::Ref<const Vec>& v) const override {
    check_apply(v.size());
    Vec coded = layout_.forward(v);
    multiply_coded(coded, false);
    return coded;
  }
  Vec apply_adjoint(const Eigen::Ref<const Vec>& v) const override {
    check_adjoint(v.size());
    Vec coded = v;
    multiply_coded(coded, true);
    return layout_.inverse(coded);
  }

 private:
  // Complex multiply in place on the packed coding; conj for the adjoint.
  void multiply_coded(Vec& coded, bool conj) const {
    const auto& slots = layout_.slots();
    for (int s = 0; s < coded.size(); ++s) {
      const auto& sl = slots[s];
      if (layout_.self_conjugate(sl.bin)) {
        coded[s] *= mult_[sl.bin].real();
      } else if (!sl.is_imag) {
        const double re = coded[s], im = coded[s + 1];
        double mr = mult_[sl.bin].real(), mi = mult_[sl.bin].imag();
        if (conj) mi = -mi;
        coded[s] = mr * re - mi * im;
        coded[s + 1] = mr * im + mi * re;
      }
    }
  }

  struct Layout : SpectrumLayout {
    using SpectrumLayout::SpectrumLayout;
    // Multiplier coding: (Re, Im) of the multiplier occupy the pair slots
    // unscaled; self-conjugate slots hold the (real) multiplier.
    Cvec unpack_multiplier(const Vec& coded) const {
      Cvec m(n(), {0.0, 0.0});
      for (int s = 0; s < n(); ++s) {
        const auto& sl = slots()[s];
        if (self_conjugate(sl.bin)) {
          m[sl.bin] = {coded[s], 0.0};
        } else if (!sl.is_imag) {
          m[sl.bin] = {coded[s], coded[s + 1]};
        }
      }
      return m;
    }
  };

  Layout layout_;
  Cvec mult_;
};

class SubsampledDftOp final : public LinOp {
 public:
  SubsampledDftOp(int h, int w, std::vector<int> rows)
      : layout_(h, w), rows_(std::move(rows)) {
    if (rows_.empty())
      throw std::invalid_argument("subsampled_dft_op: empty selection");
    for (int r : rows_)
      if (r < 0 || r >= layout_.n())
        throw std::out_of_range("subsampled_dft_op: row index out of range");
  }
  Eigen::Index rows() const override { return Eigen::Index(rows_.size()); }
  Eigen::Index cols() const override { return layout_.n(); }
  Vec apply(const Eigen::Ref<const Vec>& v) const override {
    check_apply(v.size());
    Vec coded = layout_.forward(v);
    Vec out(rows());
    for (size_t i = 0; i < rows_.size(); ++i) out[i] = coded[rows_[i]];
    return out;
  }
  Vec apply_adjoint(const Eigen::Ref<const Vec>& v) const override {
    check_adjoint(v.size());
    Vec coded = Vec::Zero(layout_.n());
    for (size_t i = 0; i < rows_.size(); ++i) coded[rows_[i]] += v[i];
    return layout_.inverse(coded);
  }

 private:
  SpectrumLayout layout_;
  std::vector<int> rows_;
};

class DiffOp final : public LinOp {
 public:
  DiffOp(int h, int w) : h_(h), w_(w) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("diff_op: bad dims");
  }
  Eigen::Index rows() const override { return 2 * Eigen::Index(h_) * w_; }
  Eigen::Index cols() const override { return Eigen::Index(h_) * w_; }
  Vec apply(const Eigen::Ref<const Vec>& v) const override {
    check_apply(v.size());
    const int n = h_ * w_;
    Vec out(2 * n);
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) {
        const int i = y * w_ + x;
        out[i] = v[y * w_ + (x + 1) % w_] - v[i];          // horizontal
        out[n + i] = v[((y + 1) % h_) * w_ + x] - v[i];    // vertical
      }
    return out;
  }
  Vec apply_adjoint(const Eigen::Ref<const Vec>& v) const override {
    check_adjoint(v.size());
    const int n = h_ * w_;
    Vec out = Vec::Zero(n);
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) {
        const int i = y * w_ + x;
        out[y * w_ + (x + 1) % w_] += v[i];
        out[i] -= v[i];
        out[((y + 1) % h_) * w_ + x] += v[n + i];
        out[i] -= v[n + i];
      }
    return out;
  }

 private:
  int h_, w_;
};

// Daubechies-4 analysis filters.
const double kDb4H[4] = {0.48296291314453414337, 0.83651630373780790558,
                         0.22414386804201338102, -0.12940952255126038117};

class WaveletOp final : public LinOp {
 public:
  WaveletOp(int h, int w, int levels) : h_(h), w_(w), levels_(levels) {
    if (h <= 0 || w <= 0 || levels < 0)
      throw std::invalid_argument("wavelet_op: bad arguments");
    const int p = 1 << levels;
    if (h % p != 0 || w % p != 0)
      throw std::invalid_argument(
          "wavelet_op: dims must be divisible by 2^levels");
  }
  Eigen::Index rows() const override { return Eigen::Index(h_) * w_; }
  Eigen::Index cols() const override { return Eigen::Index(h_) * w_; }

  Vec apply(const Eigen::Ref<const Vec>& v) const override {
    check_apply(v.size());
    Vec out = v;
    std::vector<double> buf(std::max(h_, w_));
    int ch = h_, cw = w_;
    for (int l = 0; l < levels_; ++l) {
      for (int y = 0; y < ch; ++y) analyze_row(out, y * w_, 1, cw, buf);
      for (int x = 0; x < cw; ++x) analyze_row(out, x, w_, ch, buf);
      ch /= 2;
      cw /= 2;
    }
    return out;
  }
  Vec apply_adjoint(const Eigen::Ref<const Vec>& v) const override {
    check_adjoint(v.size());
    Vec out = v;
    std::vector<double> buf(std::max(h_, w_));
    for (int l = levels_ - 1; l >= 0; --l) {
      const int ch = h_ >> l, cw = w_ >> l;
      for (int x = 0; x < cw; ++x) synthesize_row(out, x, w_, ch, buf);
      for (int y = 0; y < ch; ++y) synthesize_row(out, y * w_, 1, cw, buf);
    }
    return out;
  }

 private:
  // One periodic D4 analysis pass over a strided length-len slice:
  // first half approx, second half detail.
  static void analyze_row(Vec& a, int off, int stride, int len,
                          std::vector<double>& buf) {
    const int half = len / 2;
    for (int k = 0; k < half; ++k) {
      double s = 0.0, d = 0.0;
      for (int t = 0; t < 4; ++t) {
        const double x = a[off + ((2 * k + t) % len) * stride];
        s += kDb4H[t] * x;
        d += ((t & 1) ? -kDb4H[3 - t] : kDb4H[3 - t]) * x;
      }
      buf[k] = s;
      buf[half + k] = d;
    }
    for (int k = 0; k < len; ++k) a[off + k * stride] = buf[k];
  }

  static void synthesize_row(Vec& a, int off, int stride, int len,
                             std::vector<double>& buf) {
    const int half = len / 2;
    std::fill(buf.begin(), buf.begin() + len, 0.0);
    for (int k = 0; k < half; ++k) {
      const double s = a[off + k * stride];
      const double d = a[off + (half + k) * stride];
      for (int t = 0; t < 4; ++t) {
        const double g = (t & 1) ? -kDb4H[3 - t] : kDb4H[3 - t];
        buf[(2 * k + t) % len] += kDb4H[t] * s + g * d;
      }
    }
    for (int k = 0; k < len; ++k) a[off + k * stride] = buf[k];
  }

  int h_, w_, levels_;
};

class StackedOp final : public LinOp {
 public:
  explicit StackedOp(std::vector<LinOpPtr> blocks) : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw std::invalid_argument("stacked_op: no blocks");
    cols_ = blocks_[0]->cols();
    rows_ = 0;
    for (const auto& b : blocks_) {
      if (b->cols() != cols_)
        throw std::invalid_argument("stacked_op: column mismatch");
      rows_ += b->rows();
    }
  }
  Eigen::Index rows() const override { return rows_; }
  Eigen::Index cols() const override { return cols_; }
  Vec apply(const Eigen::Ref<const Vec>& v) const override {
    check_apply(v.size());
    Vec out(rows_);
    Eigen::Index at = 0;
    for (const auto& b : blocks_) {
      out.segment(at, b->rows()) = b->apply(v);
      at += b->rows();
    }
    return out;
  }
  Vec apply_adjoint(const Eigen::Ref<const Vec>& v) const override {
    check_adjoint(v.size());
    Vec out = Vec::Zero(cols_);
    Eigen::Index at = 0;
    for (const auto& b : blocks_) {
      out += b->apply_adjoint(v.segment(at, b->rows()));
      at += b->rows();
    }
    return out;
  }

 private:
  std::vector<LinOpPtr> blocks_;
  Eigen::Index rows_, cols_;
};

}  // namespace

LinOpPtr dense_op(const Mat& m) { return std::make_shared<DenseOp>(m); }

LinOpPtr dft_blur_op(const Vec& kernel_spectrum, int h, int w) {
  return std::make_shared<DftBlurOp>(kernel_spectrum, h, w);
}

Vec kernel_image_to_spectrum(const Vec& kernel, int kh, int kw, int h, int w) {
  if (kernel.size() != Eigen::Index(kh) * kw)
    throw std::invalid_argument("kernel_image_to_spectrum: size mismatch");
  if (kh > h || kw > w)
    throw std::invalid_argument("kernel_image_to_spectrum: kernel too large");
  SpectrumLayout layout(h, w);
  // Embed periodically, centered so the kernel acts as a centered blur.
  Vec grid = Vec::Zero(h * w);
  for (int y = 0; y < kh; ++y)
    for (int x = 0; x < kw; ++x) {
      const int gy = ((y - kh / 2) % h + h) % h;
      const int gx = ((x - kw / 2) % w + w) % w;
      grid[gy * w + gx] += kernel[y * kw + x];
    }
  // Convolution theorem with unitary DFTs carries a sqrt(n) factor.
  Cvec spec(h * w);
  for (int i = 0; i < h * w; ++i) spec[i] = {grid[i], 0.0};
  {
    Cvec row(w), col(h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) row[x] = spec[y * w + x];
      fft(row, -1);
      for (int x = 0; x < w; ++x) spec[y * w + x] = row[x];
    }
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) col[y] = spec[y * w + x];
      fft(col, -1);
      for (int y = 0; y < h; ++y) spec[y * w + x] = col[y];
    }
  }
  // Multiplier coding: unscaled (Re, Im) per representative bin.
  Vec out(h * w);
  for (int s = 0; s < h * w; ++s) {
    const auto& sl = layout.slots()[s];
    out[s] = sl.is_imag ? spec[sl.bin].imag() : spec[sl.bin].real();
  }
  return out;
}

LinOpPtr subsampled_dft_op(int h, int w, const std::vector<int>& rows) {
  return std::make_shared<SubsampledDftOp>(h, w, rows);
}

std::vector<int> phase_encode_rows(int h, int w, const std::vector<int>& cols) {
  if (cols.empty()) throw std::invalid_argument("phase_encode_rows: empty");
  std::vector<uint8_t> take(w, 0);
  for (int c : cols) {
    if (c < 0 || c >= w)
      throw std::out_of_range("phase_encode_rows: column out of range");
    take[c] = 1;
    take[(w - c) % w] = 1;  // close under conjugation
  }
  SpectrumLayout layout(h, w);
  std::vector<int> rows;
  for (int s = 0; s < h * w; ++s) {
    const int kx = layout.slots()[s].bin % w;
    if (take[kx]) rows.push_back(s);
  }
  return rows;
}

LinOpPtr diff_op(int h, int w) { return std::make_shared<DiffOp>(h, w); }

LinOpPtr wavelet_op(int h, int w, int levels) {
  return std::make_shared<WaveletOp>(h, w, levels);
}

LinOpPtr stacked_op(std::vector<LinOpPtr> blocks) {
  return std::make_shared<StackedOp>(std::move(blocks));
}

}  // namespace epinf
