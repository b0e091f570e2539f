#include "msce/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "msce/distributions.hpp"
#include "msce/error.hpp"
#include "msce/log.hpp"
#include "msce/marginal.hpp"
#include "msce/parallel.hpp"
#include "msce/special.hpp"

namespace msce::diagnostics {

using model::ColumnParams;
using model::MSCEParams;
using model::ModelLayout;

namespace {

double uniform01(Rng& rng) { return std::generate_canonical<double, 53>(rng); }

// Validation against data may condition at the fitting threshold itself.
void check_x_quantile(double q, const ModelLayout& layout, bool allow_threshold = false) {
  const double tau_u = threshold_probability(layout.u);
  const bool above = allow_threshold ? q >= tau_u - 1e-12 : q > tau_u;
  if (!(above && q < 1.0))
    throw std::invalid_argument("x quantile " + std::to_string(q) + " must lie in (" + std::to_string(tau_u) +
                                ", 1)");
}

std::vector<DeltaLaplaceMargin> margins_of(const std::vector<ColumnParams>& cols) {
  std::vector<DeltaLaplaceMargin> m;
  m.reserve(cols.size());
  for (const auto& c : cols) m.emplace_back(c.mu, c.sigma, c.delta);
  return m;
}

// Maps rows of standard normals to residuals in place.
void normals_to_residuals(RowMatrixXd& g, const CorrelationFactor& f, const std::vector<DeltaLaplaceMargin>& margins) {
  const Eigen::Index d = g.cols();
  parallel_for(static_cast<std::size_t>(g.rows()), [&](std::size_t b, std::size_t e) {
    for (auto i = static_cast<Eigen::Index>(b); i < static_cast<Eigen::Index>(e); ++i) {
      const VectorXd w = f.lower * g.row(i).transpose();
      for (Eigen::Index c = 0; c < d; ++c)
        g(i, c) = dl_quantile(Tails{special::normal_cdf(w(c)), special::normal_upper(w(c))},
                              margins[static_cast<std::size_t>(c)]);
    }
  });
}

CorrelationFactor conditional_factor(const MSCEParams& params, const ModelLayout& layout) {
  return factorize_correlation(model::conditional_corr(model::unconditional_corr(params, layout)));
}

double percentile(std::vector<double> v, double p) { return marginal::sample_quantile(std::move(v), p); }

// Standard error of a sample quantile via the local quantile slope.
double quantile_se(const std::vector<double>& sorted_values, double p) {
  const auto n = static_cast<double>(sorted_values.size());
  if (n < 2) return std::numeric_limits<double>::infinity();
  const double h = std::min(0.02, 0.5 * std::min(p, 1.0 - p));
  const double slope =
      (marginal::sample_quantile(sorted_values, p + h) - marginal::sample_quantile(sorted_values, p - h)) / (2.0 * h);
  return slope * std::sqrt(p * (1.0 - p) / n);
}

std::vector<double> column(const RowMatrixXd& m, Eigen::Index c) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) v[static_cast<std::size_t>(i)] = m(i, c);
  return v;
}

}  // namespace

double threshold_probability(double u) { return std_laplace_cdf(u); }

RowMatrixXd sample_residuals(const MSCEParams& params, const ModelLayout& layout, std::size_t n, Rng& rng) {
  const CorrelationFactor f = conditional_factor(params, layout);
  const auto margins = margins_of(model::column_params(params, layout));
  const Eigen::Index d = f.dim();
  RowMatrixXd g(static_cast<Eigen::Index>(n), d);
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index c = 0; c < d; ++c) g(i, c) = normal(rng);
  normals_to_residuals(g, f, margins);
  return g;
}

RowMatrixXd simulate_given_x(const MSCEParams& params, const ModelLayout& layout, const VectorXd& x, Rng& rng) {
  RowMatrixXd z = sample_residuals(params, layout, static_cast<std::size_t>(x.size()), rng);
  const auto cols = model::column_params(params, layout);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const ColumnParams& cp = cols[static_cast<std::size_t>(c)];
      z(i, c) = cp.alpha * x(i) + std::pow(x(i), cp.beta) * z(i, c);
    }
  return z;
}

RowMatrixXd simulate_conditional(const MSCEParams& params, const ModelLayout& layout, double x_quantile,
                                 std::size_t n_sims, std::uint64_t seed) {
  check_x_quantile(x_quantile, layout);
  Rng rng(seed);
  const VectorXd x = VectorXd::Constant(static_cast<Eigen::Index>(n_sims), std_laplace_quantile(x_quantile));
  return simulate_given_x(params, layout, x, rng);
}

namespace {

// One simulated row per entry of x with parameters drawn from samples.
RowMatrixXd simulate_from_samples(const std::vector<VectorXd>& samples, const ModelLayout& layout, const VectorXd& x,
                                  Rng& rng, std::size_t& skipped) {
  if (samples.empty()) throw std::invalid_argument("no posterior samples supplied");
  const int mp = layout.m * layout.p;
  RowMatrixXd out(x.size(), mp);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  skipped = 0;
  Eigen::Index row = 0;
  std::size_t attempts = 0;
  while (row < x.size()) {
    if (++attempts > 100 * static_cast<std::size_t>(x.size()) + 1000)
      throw ComputationError("SIMULATION_FAILED", "too many posterior draws with non-PD correlation");
    const MSCEParams p = MSCEParams::unpack(samples[pick(rng)], layout.m, layout.n_nod);
    Rng sub(rng());
    try {
      out.row(row) = simulate_given_x(p, layout, x.segment(row, 1), sub).row(0);
      ++row;
    } catch (const Error&) {
      ++skipped;
    }
  }
  if (skipped > 0) log_warning("simulation: skipped " + std::to_string(skipped) + " non-PD posterior draws");
  return out;
}

}  // namespace

ChainSimulation simulate_conditional(const std::vector<VectorXd>& samples, const ModelLayout& layout,
                                     double x_quantile, std::size_t n_sims, std::uint64_t seed) {
  check_x_quantile(x_quantile, layout);
  Rng rng(seed);
  ChainSimulation out;
  out.x = std_laplace_quantile(x_quantile);
  const VectorXd x = VectorXd::Constant(static_cast<Eigen::Index>(n_sims), out.x);
  out.values = simulate_from_samples(samples, layout, x, rng, out.skipped);
  return out;
}

ConditionalProfile conditional_profiles(const std::vector<VectorXd>& samples, const ModelLayout& layout,
                                        double x_quantile, const std::vector<double>& grid) {
  check_x_quantile(x_quantile, layout);
  if (samples.empty()) throw std::invalid_argument("conditional_profiles: no samples");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw std::invalid_argument("conditional_profiles: grid must increase");
  ConditionalProfile out;
  out.x = std_laplace_quantile(x_quantile);
  out.distances = grid;
  const auto m = static_cast<std::size_t>(layout.m);
  const std::size_t g = grid.size();
  for (auto* v : {&out.mean, &out.lo, &out.hi, &out.sd, &out.sd_lo, &out.sd_hi})
    v->assign(m, std::vector<double>(g));
  // values[k][grid][sample]
  std::vector<std::vector<std::vector<double>>> mean_draws(m, std::vector<std::vector<double>>(g)),
      sd_draws(m, std::vector<std::vector<double>>(g));
  const double x = out.x;
  for (const auto& theta : samples) {
    const MSCEParams p = MSCEParams::unpack(theta, layout.m, layout.n_nod);
    const model::NodeProfiles prof = model::profiles(p, layout);
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t i = 0; i < g; ++i) {
        const double d = grid[i];
        const double xb = std::pow(x, prof.beta[k](d));
        mean_draws[k][i].push_back(prof.alpha[k](d) * x + xb * prof.mu[k](d));
        sd_draws[k][i].push_back(prof.sigma[k](d) * xb);
      }
  }
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t i = 0; i < g; ++i) {
      const auto& md = mean_draws[k][i];
      const auto& sd = sd_draws[k][i];
      double ms = 0.0, ss = 0.0;
      for (std::size_t s = 0; s < md.size(); ++s) {
        ms += md[s];
        ss += sd[s];
      }
      out.mean[k][i] = ms / static_cast<double>(md.size());
      out.sd[k][i] = ss / static_cast<double>(sd.size());
      out.lo[k][i] = percentile(md, 0.025);
      out.hi[k][i] = percentile(md, 0.975);
      out.sd_lo[k][i] = percentile(sd, 0.025);
      out.sd_hi[k][i] = percentile(sd, 0.975);
    }
  return out;
}

double QuantileTable::fraction_within(double factor) const {
  if (rows.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& r : rows)
    if (std::abs(r.observed - r.simulated) <= factor * r.se) ++ok;
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

QuantileTable quantile_validation(const model::LaplaceDataset& data, const std::vector<VectorXd>& samples,
                                  const ModelLayout& layout, double x_quantile, const std::vector<double>& probs,
                                  std::size_t n_sims, std::uint64_t seed) {
  check_x_quantile(x_quantile, layout, true);
  if (probs.empty()) throw std::invalid_argument("quantile_validation: no probabilities");
  for (double p : probs)
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile_validation: probabilities must lie in (0, 1)");
  if (n_sims < 2) throw std::invalid_argument("quantile_validation: need at least two simulations");
  const double xq = std::max(std_laplace_quantile(x_quantile), layout.u);
  const int mp = layout.m * layout.p;

  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < data.x.size(); ++i)
    if (data.x(i) > xq) keep.push_back(i);
  QuantileTable table;
  table.n_observed = keep.size();
  table.n_simulated = n_sims;
  if (keep.size() < 20)
    table.warnings.push_back("only " + std::to_string(keep.size()) + " conditioned observations above x = " +
                             std::to_string(xq));
  if (keep.empty()) return table;

  // Above a positive point the standard Laplace tail is exponential.
  Rng rng(seed);
  VectorXd x(static_cast<Eigen::Index>(n_sims));
  std::exponential_distribution<double> expo(1.0);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = xq + expo(rng);
  std::size_t skipped = 0;
  const RowMatrixXd sim = simulate_from_samples(samples, layout, x, rng, skipped);

  for (int c = 0; c < mp; ++c) {
    std::vector<double> obs;
    for (Eigen::Index i : keep) obs.push_back(data.y(i, c));
    std::vector<double> s = column(sim, c);
    std::sort(obs.begin(), obs.end());
    std::sort(s.begin(), s.end());
    const auto [j, k] = layout.index().pair_at(c + 1);
    for (double p : probs) {
      QuantileRow r;
      r.j = j;
      r.k = k;
      r.prob = p;
      r.observed = marginal::sample_quantile(obs, p);
      r.simulated = marginal::sample_quantile(s, p);
      r.se = std::hypot(quantile_se(obs, p), quantile_se(s, p));
      table.rows.push_back(r);
    }
  }
  return table;
}

double histogram_kl(const std::vector<double>& p_sample, const std::vector<double>& q_sample, int n_bins) {
  if (p_sample.empty() || q_sample.empty()) throw std::invalid_argument("histogram_kl: empty sample");
  if (n_bins < 1) throw std::invalid_argument("histogram_kl: need at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* s : {&p_sample, &q_sample})
    for (double v : *s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const auto nb = static_cast<std::size_t>(n_bins);
  std::vector<double> hp(nb, 1e-6), hq(nb, 1e-6);
  const double width = hi - lo;
  auto bin_of = [&](double v) {
    if (!(width > 0.0)) return std::size_t{0};
    const auto b = static_cast<std::size_t>((v - lo) / width * static_cast<double>(nb));
    return std::min(b, nb - 1);
  };
  for (double v : p_sample) hp[bin_of(v)] += 1.0;
  for (double v : q_sample) hq[bin_of(v)] += 1.0;
  double sp = 0.0, sq = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    sp += hp[b];
    sq += hq[b];
  }
  double kl = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    const double p = hp[b] / sp, q = hq[b] / sq;
    kl += p * std::log(p / q);
  }
  return std::max(kl, 0.0);
}

KLPairResult kl_pair_test(const std::vector<double>& observed, const std::vector<double>& simulated, int n_boot,
                          int n_bins, Rng& rng) {
  if (n_boot < 1) throw std::invalid_argument("kl_pair_test: n_boot must be positive");
  KLPairResult r;
  r.kl = histogram_kl(observed, simulated, n_bins);
  std::uniform_int_distribution<std::size_t> pick(0, observed.size() - 1);
  std::vector<double> null(static_cast<std::size_t>(n_boot));
  std::vector<double> a(observed.size()), b(observed.size());
  for (auto& v : null) {
    for (auto& s : a) s = observed[pick(rng)];
    for (auto& s : b) s = observed[pick(rng)];
    v = histogram_kl(a, b, n_bins);
  }
  r.null_p95 = marginal::sample_quantile(null, 0.95);
  std::size_t ge = 0;
  for (double v : null)
    if (v >= r.kl) ++ge;
  r.tail_prob = static_cast<double>(ge) / static_cast<double>(null.size());
  return r;
}

RowMatrixXd observed_residuals(const model::LaplaceDataset& data, const MSCEParams& params, const ModelLayout& layout,
                               double x_quantile) {
  const double xq = x_quantile > 0.0 ? std_laplace_quantile(x_quantile) : -std::numeric_limits<double>::infinity();
  const auto cols = model::column_params(params, layout);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < data.x.size(); ++i)
    if (data.x(i) > xq) keep.push_back(i);
  RowMatrixXd z(static_cast<Eigen::Index>(keep.size()), static_cast<Eigen::Index>(cols.size()));
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const Eigen::Index i = keep[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const ColumnParams& cp = cols[static_cast<std::size_t>(c)];
      z(r, c) = (data.y(i, c) - cp.alpha * data.x(i)) / std::pow(data.x(i), cp.beta);
    }
  }
  return z;
}

KLTestResult kl_bootstrap_test(const model::LaplaceDataset& data, const MSCEParams& params, const ModelLayout& layout,
                               double x_quantile, int n_boot, int n_bins, std::uint64_t seed) {
  if (n_boot < 200) throw std::invalid_argument("kl_bootstrap_test: n_boot must be at least 200");
  const RowMatrixXd obs = observed_residuals(data, params, layout, x_quantile);
  Rng sim_rng(derive_seed(seed, "residuals"));
  const RowMatrixXd sim = sample_residuals(params, layout, static_cast<std::size_t>(obs.rows()), sim_rng);

  KLTestResult out;
  const int mp = layout.m * layout.p;
  if (obs.rows() < 30) {
    out.skipped = static_cast<std::size_t>(mp);
    log_warning("KL test: fewer than 30 residuals per pair; all pairs skipped");
    return out;
  }
  out.rows.resize(static_cast<std::size_t>(mp));
  parallel_for(
      static_cast<std::size_t>(mp),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t c = b; c < e; ++c) {
          Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
          const auto [j, k] = layout.index().pair_at(static_cast<int>(c) + 1);
          KLRow& row = out.rows[c];
          row.j = j;
          row.k = k;
          row.n = static_cast<std::size_t>(obs.rows());
          row.result = kl_pair_test(column(obs, static_cast<Eigen::Index>(c)), column(sim, static_cast<Eigen::Index>(c)),
                                    n_boot, n_bins, rng);
        }
      },
      1);
  std::size_t exceed = 0;
  for (const auto& r : out.rows)
    if (r.result.kl > r.result.null_p95) ++exceed;
  out.exceedance_fraction = static_cast<double>(exceed) / static_cast<double>(out.rows.size());
  return out;
}

}  // namespace msce::diagnostics
