#pragma once

// Small self-contained FFT: radix-2 for power-of-two lengths, Bluestein
// (chirp-z) fallback for everything else, plus the real-coded Hermitian
// packing of 2-D spectra used by the spectral operators.
//
// Real coding convention for an h x w real image (n = h*w):
//   bins k = (ky,kx); conjugate partner k* = ((h-ky)%h,(w-kx)%w).
//   Self-conjugate bins contribute one slot holding Re(U[k]).
//   Each conjugate pair contributes two slots holding sqrt(2)*Re, sqrt(2)*Im
//   of the lexicographically smaller representative.
// With the unitary DFT this packing is an orthonormal map R^n -> R^n.

#include <complex>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace epinf {

using Cvec = std::vector<std::complex<double>>;

// In-place complex FFT of arbitrary length (sign = -1 forward, +1 inverse;
// inverse includes the 1/n factor).
void fft(Cvec& a, int sign);

// Layout of the real-coded spectrum of an h x w grid.
class SpectrumLayout {
 public:
  SpectrumLayout(int h, int w);

  int h() const { return h_; }
  int w() const { return w_; }
  int n() const { return h_ * w_; }

  // Unitary 2-D DFT of a real image (row-major), packed as real coding.
  Eigen::VectorXd forward(const Eigen::Ref<const Eigen::VectorXd>& img) const;
  // Adjoint (= inverse, the packing is orthonormal).
  Eigen::VectorXd inverse(const Eigen::Ref<const Eigen::VectorXd>& coded) const;

  // Unpack a coded vector into the full complex spectrum (unitary scale).
  Cvec unpack(const Eigen::Ref<const Eigen::VectorXd>& coded) const;
  Eigen::VectorXd pack(const Cvec& spec) const;

  // Per-slot bin index and whether the slot is the imaginary part.
  struct Slot {
    int bin;      // row-major bin index of the representative
    bool is_imag;
  };
  const std::vector<Slot>& slots() const { return slots_; }
  bool self_conjugate(int bin) const { return self_[bin]; }
  // Slot index of the real part for a representative bin (-1 if bin is not
  // a representative).
  int re_slot(int bin) const { return re_slot_[bin]; }

 private:
  void dft2d(Cvec& grid, int sign) const;

  int h_, w_;
  std::vector<Slot> slots_;
  std::vector<uint8_t> self_;
  std::vector<int> re_slot_;
  std::vector<int> conj_bin_;
};

}  // namespace epinf
