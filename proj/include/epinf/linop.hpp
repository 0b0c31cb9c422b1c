#pragma once

// Linear operators shared by the Gaussian backend and the experiment
// builders. Operators are immutable after construction; apply() is safe to
// call concurrently.

#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "epinf/fft.hpp"

namespace epinf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class LinOp {
 public:
  virtual ~LinOp() = default;
  virtual Eigen::Index rows() const = 0;
  virtual Eigen::Index cols() const = 0;
  virtual Vec apply(const Eigen::Ref<const Vec>& v) const = 0;
  virtual Vec apply_adjoint(const Eigen::Ref<const Vec>& v) const = 0;
  // Dense view when cheaply available; generic ops fall back to columns.
  virtual std::optional<Mat> materialize_dense() const { return std::nullopt; }

  // Dense matrix assembled column by column (always works, O(n) applies).
  Mat to_dense() const;

 protected:
  void check_apply(Eigen::Index got) const;
  void check_adjoint(Eigen::Index got) const;
};

using LinOpPtr = std::shared_ptr<const LinOp>;

// Wraps an explicit matrix.
LinOpPtr dense_op(const Mat& m);

// X = (diag f) F with F the real-coded unitary 2-D DFT of an h x w grid and
// f a real-coded Hermitian multiplier (complex multiply per bin).
LinOpPtr dft_blur_op(const Vec& kernel_spectrum, int h, int w);

// Multiplier spectrum of a circular convolution with `kernel` (kh x kw,
// row-major, anchored at the origin wrapping periodically).
Vec kernel_image_to_spectrum(const Vec& kernel, int kh, int kw, int h, int w);

// X = I_J F: real-coded unitary DFT followed by row selection.
LinOpPtr subsampled_dft_op(int h, int w, const std::vector<int>& selected_rows);

// Coded-slot index set for complete DFT columns ("phase encodes"); the
// column set is closed under conjugation internally.
std::vector<int> phase_encode_rows(int h, int w, const std::vector<int>& cols);

// Periodic horizontal + vertical first differences, 2n rows.
LinOpPtr diff_op(int h, int w);

// Orthonormal Daubechies-4 wavelet transform, periodic, `levels` scales.
// Requires h and w divisible by 2^levels.
LinOpPtr wavelet_op(int h, int w, int levels);

// Vertical concatenation of operators sharing cols.
LinOpPtr stacked_op(std::vector<LinOpPtr> blocks);

}  // namespace epinf
