#include "msce/distributions.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "msce/error.hpp"
#include "msce/parallel.hpp"

namespace msce {
namespace {

std::atomic<std::uint64_t> g_tail_clamps{0};

}  // namespace

double std_laplace_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::domain_error("std_laplace_quantile: p must lie in (0, 1), got " + std::to_string(p));
  return p < 0.5 ? std::log(2.0 * p) : -std::log(2.0 * (1.0 - p));
}

double std_laplace_quantile_upper(double q) {
  if (!(q > 0.0 && q < 1.0))
    throw std::domain_error("std_laplace_quantile_upper: q must lie in (0, 1)");
  return q <= 0.5 ? -std::log(2.0 * q) : std::log(2.0 * (1.0 - q));
}

DeltaLaplaceMargin::DeltaLaplaceMargin(double mu, double sigma, double delta)
    : mu_(mu), sigma_(sigma), delta_(delta) {
  if (!std::isfinite(mu)) throw std::invalid_argument("delta-Laplace: mu must be finite");
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw std::invalid_argument("delta-Laplace: sigma must be positive");
  if (!(delta > 0.0) || !std::isfinite(delta))
    throw std::invalid_argument("delta-Laplace: delta must be positive");
  inv_delta_ = 1.0 / delta;
  log_gamma_a_ = std::lgamma(inv_delta_);
  const double log_kappa = 0.5 * (log_gamma_a_ - std::lgamma(3.0 * inv_delta_));
  scale_ = std::exp(log_kappa) * sigma;
  log_norm_ = std::log(delta) - M_LN2 - std::log(scale_) - log_gamma_a_;
}

double dl_logpdf(double z, const DeltaLaplaceMargin& m) {
  const double r = std::abs((z - m.mu()) / m.scale());
  return m.log_normalizer() - std::pow(r, m.delta());
}

Tails dl_tails(double z, const DeltaLaplaceMargin& m) {
  const double r = (z - m.mu()) / m.scale();
  const double t = std::pow(std::abs(r), m.delta());
  const special::GammaTails g = special::regularized_gamma(m.shape_a(), t, m.log_gamma_a());
  if (r >= 0.0) return {0.5 + 0.5 * g.lower, 0.5 * g.upper};
  return {0.5 * g.upper, 0.5 + 0.5 * g.lower};
}

double dl_quantile(double p, const DeltaLaplaceMargin& m) {
  if (!(p > 0.0 && p < 1.0))
    throw std::domain_error("dl_quantile: p must lie in (0, 1), got " + std::to_string(p));
  return dl_quantile(Tails{p, 1.0 - p}, m);
}

double dl_quantile(const Tails& t, const DeltaLaplaceMargin& m) {
  const bool below = t.lower < t.upper;
  const double tail = below ? t.lower : t.upper;
  // P(|Z - mu| > s r) = Q(1/delta, r^delta); the one-sided tail is half of it.
  const double gq = 2.0 * tail;
  const double g = special::inverse_regularized_gamma(m.shape_a(), gq, true, m.log_gamma_a());
  const double r = std::pow(g, m.shape_a());
  return below ? m.mu() - m.scale() * r : m.mu() + m.scale() * r;
}

double gp_logpdf(double y, double sigma, double xi) {
  const double ninf = -std::numeric_limits<double>::infinity();
  if (!(y >= 0.0)) return ninf;
  if (std::abs(xi) < kGpExponentialLimit) return -std::log(sigma) - y / sigma;
  const double t = xi * y / sigma;
  if (!(t > -1.0)) return ninf;
  return -std::log(sigma) - (1.0 / xi + 1.0) * std::log1p(t);
}

double gp_survival(double y, double sigma, double xi) {
  if (y <= 0.0) return 1.0;
  if (std::abs(xi) < kGpExponentialLimit) return std::exp(-y / sigma);
  const double t = xi * y / sigma;
  if (t <= -1.0) return 0.0;
  return std::exp(-std::log1p(t) / xi);
}

double gp_cdf(double y, double sigma, double xi) {
  if (y <= 0.0) return 0.0;
  if (std::abs(xi) < kGpExponentialLimit) return -std::expm1(-y / sigma);
  const double t = xi * y / sigma;
  if (t <= -1.0) return 1.0;
  return -std::expm1(-std::log1p(t) / xi);
}

double gp_quantile(double p, double sigma, double xi) {
  if (!(p >= 0.0 && p < 1.0)) throw std::domain_error("gp_quantile: p must lie in [0, 1)");
  const double l = std::log1p(-p);
  if (std::abs(xi) < kGpExponentialLimit) return -sigma * l;
  return sigma * std::expm1(-xi * l) / xi;
}

double gp_upper_endpoint(double sigma, double xi) {
  return xi < 0.0 ? -sigma / xi : std::numeric_limits<double>::infinity();
}

bool try_factorize_correlation(const MatrixXd& corr, CorrelationFactor& out,
                               std::size_t* failed_minor) {
  const Eigen::Index n = corr.rows();
  if (corr.cols() != n) throw std::invalid_argument("correlation matrix must be square");
  MatrixXd& l = out.lower;
  l.setZero(n, n);
  double log_det = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double s = corr(j, j) - l.row(j).head(j).squaredNorm();
    if (!(s > 0.0) || !std::isfinite(s)) {
      if (failed_minor) *failed_minor = static_cast<std::size_t>(j + 1);
      return false;
    }
    const double d = std::sqrt(s);
    l(j, j) = d;
    log_det += 2.0 * std::log(d);
    for (Eigen::Index i = j + 1; i < n; ++i)
      l(i, j) = (corr(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / d;
  }
  out.log_det = log_det;
  return true;
}

CorrelationFactor factorize_correlation(const MatrixXd& corr) {
  CorrelationFactor f;
  std::size_t minor = 0;
  if (!try_factorize_correlation(corr, f, &minor)) throw FactorizationError(minor);
  return f;
}

std::uint64_t tail_clamp_events() { return g_tail_clamps.load(); }
void reset_tail_clamp_events() { g_tail_clamps.store(0); }

ResidualModel::ResidualModel(std::vector<DeltaLaplaceMargin> margins, MatrixXd corr)
    : ResidualModel(std::move(margins), factorize_correlation(corr)) {}

ResidualModel::ResidualModel(std::vector<DeltaLaplaceMargin> margins, CorrelationFactor factor)
    : margins_(std::move(margins)), factor_(std::move(factor)) {
  if (static_cast<Eigen::Index>(margins_.size()) != factor_.dim())
    throw std::invalid_argument("ResidualModel: margin count does not match correlation dimension");
}

double gaussian_score(double z, const DeltaLaplaceMargin& m) {
  const Tails t = dl_tails(z, m);
  if (t.lower < t.upper) {
    double p = t.lower;
    if (p < kTailClamp) {
      p = kTailClamp;
      g_tail_clamps.fetch_add(1, std::memory_order_relaxed);
    }
    return special::normal_quantile(p);
  }
  double q = t.upper;
  if (q < kTailClamp) {
    q = kTailClamp;
    g_tail_clamps.fetch_add(1, std::memory_order_relaxed);
  }
  return special::normal_quantile_upper(q);
}

double residual_logdensity(const VectorXd& z, const ResidualModel& model) {
  if (z.size() != model.dim())
    throw std::invalid_argument("residual_logdensity: dimension mismatch");
  VectorXd w(z.size());
  double margin_sum = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const auto& m = model.margins()[static_cast<std::size_t>(i)];
    w(i) = gaussian_score(z(i), m);
    margin_sum += dl_logpdf(z(i), m) - special::normal_logpdf(w(i));
  }
  return mvn_logpdf(w, model.factor()) + margin_sum;
}

VectorXd residual_logdensity_rows(const RowMatrixXd& z, const ResidualModel& model) {
  const Eigen::Index n = z.rows();
  const Eigen::Index d = model.dim();
  if (z.cols() != d) throw std::invalid_argument("residual_logdensity_rows: dimension mismatch");
  VectorXd out(n);
  const double constant = -0.5 * model.factor().log_det - static_cast<double>(d) * special::kLogSqrt2Pi;
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t b, std::size_t e) {
    const Eigen::Index rows = static_cast<Eigen::Index>(e - b);
    MatrixXd w(d, rows);  // one event per column
    VectorXd margin_sum = VectorXd::Zero(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::Index i = static_cast<Eigen::Index>(b) + r;
      for (Eigen::Index c = 0; c < d; ++c) {
        const auto& m = model.margins()[static_cast<std::size_t>(c)];
        const double score = gaussian_score(z(i, c), m);
        w(c, r) = score;
        margin_sum(r) += dl_logpdf(z(i, c), m) - special::normal_logpdf(score);
      }
    }
    model.factor().lower.triangularView<Eigen::Lower>().solveInPlace(w);
    for (Eigen::Index r = 0; r < rows; ++r)
      out(static_cast<Eigen::Index>(b) + r) = constant - 0.5 * w.col(r).squaredNorm() + margin_sum(r);
  });
  return out;
}

}  // namespace msce
