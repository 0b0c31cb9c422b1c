#pragma once

// Scaled complementary error function and Gaussian tail helpers used by the
// tilted-moment computations. All routines are safe for arguments far into
// the tails: they return 0/inf gracefully instead of NaN.

#include <cmath>

namespace epinf {

// erfcx(x) = exp(x^2) * erfc(x).
// x < 0 uses the reflection erfcx(x) = 2 exp(x^2) - erfcx(-x) and may
// overflow to +inf for x < -26.6, which callers must tolerate.
double erfcx(double x);

// log(erfcx(x)) for any x, without overflow on the negative side.
double log_erfcx(double x);

// Hazard rate phi(a) / (1 - Phi(a)) of the standard normal.
double normal_hazard(double alpha);

// Mean and variance of X ~ N(0,1) conditioned on X >= alpha.
// Stable for alpha up to ~1e8 (series branch) and down to -inf.
struct TruncStdMoments {
  double mean;  // E[X | X >= alpha]
  double var;   // Var[X | X >= alpha]
};
TruncStdMoments trunc_std_lower(double alpha);

// log(exp(a) + exp(b)) without overflow.
double logaddexp(double a, double b);

}  // namespace epinf
