#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <vector>

#include "msce/special.hpp"
#include "msce/types.hpp"

namespace msce {

// ---- standard Laplace ------------------------------------------------------

template <typename Scalar>
Scalar std_laplace_cdf(Scalar x) {
  using std::exp;
  return x < Scalar(0) ? Scalar(0.5) * exp(x) : Scalar(1) - Scalar(0.5) * exp(-x);
}

template <typename Scalar>
Scalar std_laplace_logpdf(Scalar x) {
  using std::abs;
  return -abs(x) - Scalar(M_LN2);
}

// Throws std::domain_error unless 0 < p < 1.
double std_laplace_quantile(double p);
// Quantile given the upper tail probability 1 - p.
double std_laplace_quantile_upper(double q);

// ---- delta-Laplace (generalised Gaussian) ----------------------------------

// Delta-Laplace margin with mean mu, standard deviation sigma and shape delta.
// delta = 1 is Laplace, delta = 2 is Gaussian. The internal scale is
// kappa * sigma with kappa^2 = Gamma(1/delta) / Gamma(3/delta).
class DeltaLaplaceMargin {
 public:
  DeltaLaplaceMargin() : DeltaLaplaceMargin(0.0, 1.0, 2.0) {}
  DeltaLaplaceMargin(double mu, double sigma, double delta);

  double mu() const { return mu_; }
  double sigma() const { return sigma_; }
  double delta() const { return delta_; }
  double kappa() const { return scale_ / sigma_; }
  // kappa * sigma
  double scale() const { return scale_; }
  double shape_a() const { return inv_delta_; }
  double log_gamma_a() const { return log_gamma_a_; }
  // log of delta / (2 kappa sigma Gamma(1/delta))
  double log_normalizer() const { return log_norm_; }

 private:
  double mu_;
  double sigma_;
  double delta_;
  double inv_delta_;
  double log_gamma_a_;
  double scale_;
  double log_norm_;
};

double dl_logpdf(double z, const DeltaLaplaceMargin& m);

struct Tails {
  double lower;  // F(z)
  double upper;  // 1 - F(z)
};

Tails dl_tails(double z, const DeltaLaplaceMargin& m);
inline double dl_cdf(double z, const DeltaLaplaceMargin& m) { return dl_tails(z, m).lower; }
// Throws std::domain_error unless 0 < p < 1.
double dl_quantile(double p, const DeltaLaplaceMargin& m);
// Quantile from the tail pair; uses whichever tail is smaller.
double dl_quantile(const Tails& t, const DeltaLaplaceMargin& m);

// ---- generalised Pareto ----------------------------------------------------

inline constexpr double kGpExponentialLimit = 1e-8;

// -inf outside the support (y < 0 or beyond the finite upper endpoint).
double gp_logpdf(double y, double sigma, double xi);
double gp_cdf(double y, double sigma, double xi);
double gp_survival(double y, double sigma, double xi);
// Inverse of gp_cdf, p in [0, 1).
double gp_quantile(double p, double sigma, double xi);
// Upper endpoint of the support, +inf for xi >= 0.
double gp_upper_endpoint(double sigma, double xi);

// ---- multivariate normal ---------------------------------------------------

// Lower Cholesky factor of a correlation matrix with its log-determinant.
struct CorrelationFactor {
  MatrixXd lower;
  double log_det = 0.0;
  Eigen::Index dim() const { return lower.rows(); }
};

// Throws FactorizationError naming the first non-positive leading minor.
CorrelationFactor factorize_correlation(const MatrixXd& corr);
// Returns false instead of throwing; `failed_minor` receives the 1-based index.
bool try_factorize_correlation(const MatrixXd& corr, CorrelationFactor& out,
                               std::size_t* failed_minor = nullptr);

template <typename Derived>
double mvn_logpdf(const Eigen::MatrixBase<Derived>& w, const CorrelationFactor& f) {
  VectorXd v = f.lower.template triangularView<Eigen::Lower>().solve(w.template cast<double>());
  return -0.5 * v.squaredNorm() - 0.5 * f.log_det -
         static_cast<double>(w.size()) * special::kLogSqrt2Pi;
}

inline double mvn_logpdf(const VectorXd& w, const MatrixXd& corr) {
  return mvn_logpdf(w, factorize_correlation(corr));
}

// ---- Gaussian copula with delta-Laplace margins ----------------------------

// Count of Gaussian scores clamped because F(z) was within 1e-15 of 0 or 1.
std::uint64_t tail_clamp_events();
void reset_tail_clamp_events();

inline constexpr double kTailClamp = 1e-15;

class ResidualModel {
 public:
  // Throws FactorizationError when corr is not positive definite and
  // std::invalid_argument on a dimension mismatch.
  ResidualModel(std::vector<DeltaLaplaceMargin> margins, MatrixXd corr);
  ResidualModel(std::vector<DeltaLaplaceMargin> margins, CorrelationFactor factor);

  Eigen::Index dim() const { return static_cast<Eigen::Index>(margins_.size()); }
  const std::vector<DeltaLaplaceMargin>& margins() const { return margins_; }
  const CorrelationFactor& factor() const { return factor_; }

 private:
  std::vector<DeltaLaplaceMargin> margins_;
  CorrelationFactor factor_;
};

// Gaussian score Phi^{-1}(F(z)) with the 1e-15 tail clamp.
double gaussian_score(double z, const DeltaLaplaceMargin& m);

double residual_logdensity(const VectorXd& z, const ResidualModel& model);

// Row-wise log-densities for an n x dim residual table.
VectorXd residual_logdensity_rows(const RowMatrixXd& z, const ResidualModel& model);

}  // namespace msce
