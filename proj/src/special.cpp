#include "msce/special.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace msce::special {
namespace {

constexpr double kEps = 1e-16;
constexpr double kTiny = 1e-300;
constexpr int kMaxIter = 2000;

// log of x^a e^-x / Gamma(a)
double log_prefactor(double a, double x, double log_gamma_a) {
  return -x + a * std::log(x) - log_gamma_a;
}

double lower_series(double a, double x, double log_gamma_a) {
  double ap = a;
  double term = 1.0 / a;
  double sum = term;
  for (int n = 0; n < kMaxIter; ++n) {
    ap += 1.0;
    term *= x / ap;
    sum += term;
    if (std::abs(term) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(log_prefactor(a, x, log_gamma_a));
}

// Modified Lentz evaluation of the continued fraction for Q(a, x).
double upper_continued_fraction(double a, double x, double log_gamma_a) {
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return std::exp(log_prefactor(a, x, log_gamma_a)) * h;
}

// Acklam's rational approximation for p <= 0.5, followed by one Halley step.
double lower_quantile(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

}  // namespace

GammaTails regularized_gamma(double a, double x) {
  return regularized_gamma(a, x, std::lgamma(a));
}

GammaTails regularized_gamma(double a, double x, double log_gamma_a) {
  if (!(a > 0.0)) throw std::domain_error("regularized_gamma: a must be positive");
  if (std::isnan(x)) return {x, x};
  if (x <= 0.0) return {0.0, 1.0};
  if (std::isinf(x)) return {1.0, 0.0};
  if (x < a + 1.0) {
    const double p = lower_series(a, x, log_gamma_a);
    return {p, 1.0 - p};
  }
  const double q = upper_continued_fraction(a, x, log_gamma_a);
  return {1.0 - q, q};
}

double inverse_regularized_gamma(double a, double q, bool upper, double log_gamma_a) {
  if (!(a > 0.0)) throw std::domain_error("inverse_regularized_gamma: a must be positive");
  const double inf = std::numeric_limits<double>::infinity();
  if (q <= 0.0) return upper ? inf : 0.0;
  if (q >= 1.0) return upper ? 0.0 : inf;

  // Starting point (Numerical Recipes' invgammp guess), driven by the
  // smaller of the two tail probabilities.
  const double p_lower = upper ? 1.0 - q : q;
  const double p_upper = upper ? q : 1.0 - q;
  double x;
  if (a > 1.0) {
    const double pp = std::min(p_lower, p_upper);
    const double t = std::sqrt(-2.0 * std::log(pp));
    double z = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t;
    if (p_lower >= 0.5) z = -z;
    const double s = 1.0 - 1.0 / (9.0 * a) - z / (3.0 * std::sqrt(a));
    x = std::max(1e-3, a * s * s * s);
  } else {
    const double t = 1.0 - a * (0.253 + a * 0.12);
    if (p_lower < t)
      x = std::pow(p_lower / t, 1.0 / a);
    else
      x = 1.0 - std::log(p_upper / (1.0 - t));
  }
  if (!(x > 0.0) || !std::isfinite(x)) x = a;

  // Safeguarded Newton iteration on u = log x.
  double lo = -inf, hi = inf;  // bracket in u
  double u = std::log(x);
  for (int it = 0; it < 200; ++it) {
    x = std::exp(u);
    const GammaTails g = regularized_gamma(a, x, log_gamma_a);
    const double value = upper ? g.upper : g.lower;
    const double f = value - q;
    // Both tails are monotone in x; `too_small` means x must grow.
    const bool too_small = upper ? f > 0.0 : f < 0.0;
    if (too_small)
      lo = u;
    else
      hi = u;
    if (f == 0.0) break;
    const double dens_dx = std::exp(log_prefactor(a, x, log_gamma_a) - std::log(x));
    const double dvalue_du = (upper ? -dens_dx : dens_dx) * x;
    double next = u - f / dvalue_du;
    if (!std::isfinite(next) || next <= lo || next >= hi) {
      if (std::isfinite(lo) && std::isfinite(hi))
        next = 0.5 * (lo + hi);
      else if (std::isfinite(lo))
        next = lo + 1.0;
      else
        next = hi - 1.0;
    }
    const double step = next - u;
    u = next;
    if (std::abs(step) < 1e-15 * std::max(1.0, std::abs(u))) break;
    if (std::isfinite(lo) && std::isfinite(hi) && hi - lo < 1e-15 * std::max(1.0, std::abs(u))) break;
  }
  return std::exp(u);
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw std::domain_error("normal_quantile: p must lie in [0, 1]");
  }
  return p <= 0.5 ? lower_quantile(p) : -lower_quantile(1.0 - p);
}

double normal_quantile_upper(double q) {
  if (!(q > 0.0 && q < 1.0)) {
    if (q == 0.0) return std::numeric_limits<double>::infinity();
    if (q == 1.0) return -std::numeric_limits<double>::infinity();
    throw std::domain_error("normal_quantile_upper: q must lie in [0, 1]");
  }
  return q <= 0.5 ? -lower_quantile(q) : lower_quantile(1.0 - q);
}

}  // namespace msce::special
