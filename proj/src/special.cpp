#include "epinf/special.hpp"

#include <limits>

namespace epinf {

namespace {

constexpr double kInvSqrtPi = 0.56418958354775628695;  // 1/sqrt(pi)
constexpr double kSqrt2OverPi = 0.79788456080286535588;  // sqrt(2/pi)

// Laplace continued fraction for erfcx, valid for x >= ~2. Modified Lentz.
double erfcx_cf(double x) {
  const double tiny = 1e-300;
  double f = x;
  double c = f;
  double d = 0.0;
  for (int k = 1; k <= 120; ++k) {
    const double a = 0.5 * k;  // partial numerator
    d = x + a * d;
    if (d == 0.0) d = tiny;
    c = x + a / c;
    if (c == 0.0) c = tiny;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::fabs(delta - 1.0) < 1e-17) break;
  }
  return kInvSqrtPi / f;
}

}  // namespace

double erfcx(double x) {
  if (std::isnan(x)) return x;
  if (x < 0.0) {
    // 2 exp(x^2) - erfcx(-x); overflows to inf for very negative x.
    const double e = std::exp(x * x);
    return 2.0 * e - erfcx(-x);
  }
  if (x < 2.5) return std::exp(x * x) * std::erfc(x);
  return erfcx_cf(x);
}

double log_erfcx(double x) {
  if (x >= 0.0) return std::log(erfcx(x));
  // erfcx(x) = exp(x^2) (2 - erfc(-x)); erfc(-x) in (0,1) here.
  return x * x + std::log(2.0 - std::erfc(-x));
}

double normal_hazard(double alpha) {
  const double e = erfcx(alpha * M_SQRT1_2);
  if (std::isinf(e)) return 0.0;
  return kSqrt2OverPi / e;
}

TruncStdMoments trunc_std_lower(double alpha) {
  if (alpha >= 35.0) {
    // Asymptotic series in x = alpha^-2. The direct 1 - h*g form loses
    // eps * alpha^4 relative accuracy in the variance, so it is unusable
    // well before the hazard itself degrades.
    const double x = 1.0 / (alpha * alpha);
    const double g =
        (1.0 - x * (2.0 - x * (10.0 - x * (74.0 - 706.0 * x)))) / alpha;
    const double v = x * (1.0 - x * (6.0 - x * (50.0 - x * (518.0 - 6354.0 * x))));
    return {alpha + g, v};
  }
  const double h = normal_hazard(alpha);
  const double g = h - alpha;  // no cancellation: g > 0, and alpha<0 adds
  return {h, 1.0 - h * g};
}

double logaddexp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = a > b ? a : b;
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

}  // namespace epinf
