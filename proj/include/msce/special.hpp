#pragma once

#include <cmath>

namespace msce::special {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2 pi))

// Lower and upper regularized incomplete gamma, P(a, x) and Q(a, x),
// each carried to full relative precision in its own tail.
struct GammaTails {
  double lower;
  double upper;
};

GammaTails regularized_gamma(double a, double x);
// Same, with log Gamma(a) supplied by the caller (hot loops precompute it).
GammaTails regularized_gamma(double a, double x, double log_gamma_a);

inline double gamma_p(double a, double x) { return regularized_gamma(a, x).lower; }
inline double gamma_q(double a, double x) { return regularized_gamma(a, x).upper; }

// Solves Q(a, x) = q (upper = true) or P(a, x) = q (upper = false) for x.
double inverse_regularized_gamma(double a, double q, bool upper, double log_gamma_a);

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
inline double normal_upper(double x) { return 0.5 * std::erfc(x * M_SQRT1_2); }
inline double normal_logpdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

// Inverse of the standard normal CDF; |error| < 1e-12 on (0, 1).
double normal_quantile(double p);
// Quantile from an upper tail probability q = 1 - p, accurate for tiny q.
double normal_quantile_upper(double q);

}  // namespace msce::special
