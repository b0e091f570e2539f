#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "msce/model.hpp"
#include "msce/rng.hpp"
#include "msce/types.hpp"

namespace msce::diagnostics {

// Probability of the standard Laplace below u.
double threshold_probability(double u);

// n draws of the residual vector Z (n x mp) under the copula model.
// Throws FactorizationError when the conditional correlation is not PD.
RowMatrixXd sample_residuals(const model::MSCEParams& params, const model::ModelLayout& layout, std::size_t n,
                             Rng& rng);

// Remote values alpha x + x^beta Z for each supplied x (one row per x).
RowMatrixXd simulate_given_x(const model::MSCEParams& params, const model::ModelLayout& layout, const VectorXd& x,
                             Rng& rng);

// x fixed at the x_quantile point of the standard Laplace.
RowMatrixXd simulate_conditional(const model::MSCEParams& params, const model::ModelLayout& layout,
                                 double x_quantile, std::size_t n_sims, std::uint64_t seed);

struct ChainSimulation {
  double x = 0.0;
  RowMatrixXd values;
  std::size_t skipped = 0;  // draws whose parameters gave a non-PD correlation
};

// Parameters drawn per simulation from the supplied (post-burn-in) samples.
ChainSimulation simulate_conditional(const std::vector<VectorXd>& samples, const model::ModelLayout& layout,
                                     double x_quantile, std::size_t n_sims, std::uint64_t seed);

struct ConditionalProfile {
  double x = 0.0;
  std::vector<double> distances;
  // Indexed [k][grid point].
  std::vector<std::vector<double>> mean, lo, hi;
  std::vector<std::vector<double>> sd, sd_lo, sd_hi;
};

ConditionalProfile conditional_profiles(const std::vector<VectorXd>& samples, const model::ModelLayout& layout,
                                        double x_quantile, const std::vector<double>& grid);

struct QuantileRow {
  int j = 0;
  int k = 0;
  double prob = 0.0;
  double observed = 0.0;
  double simulated = 0.0;
  double se = 0.0;  // Monte-Carlo standard error of observed - simulated
};

struct QuantileTable {
  std::vector<QuantileRow> rows;
  std::size_t n_observed = 0;
  std::size_t n_simulated = 0;
  std::vector<std::string> warnings;

  // Fraction of rows with |observed - simulated| <= factor * se.
  double fraction_within(double factor) const;
};

inline const std::vector<double> kDefaultProbs{0.025, 0.25, 0.5, 0.75, 0.975};

// Observed events with x above the x_quantile point against simulations
// whose x is drawn from the standard Laplace above that point.
QuantileTable quantile_validation(const model::LaplaceDataset& data, const std::vector<VectorXd>& samples,
                                  const model::ModelLayout& layout, double x_quantile,
                                  const std::vector<double>& probs, std::size_t n_sims, std::uint64_t seed);

// Histogram KL(P || Q) on common edges spanning the pooled range with
// additive smoothing of 1e-6 per bin.
double histogram_kl(const std::vector<double>& p_sample, const std::vector<double>& q_sample, int n_bins);

struct KLPairResult {
  double kl = 0.0;
  double null_p95 = 0.0;
  double tail_prob = 0.0;
};

// Observed vs simulated KL against the null of KL between pairs of
// with-replacement resamples of the observed values.
KLPairResult kl_pair_test(const std::vector<double>& observed, const std::vector<double>& simulated, int n_boot,
                          int n_bins, Rng& rng);

struct KLRow {
  int j = 0;
  int k = 0;
  std::size_t n = 0;
  KLPairResult result;
};

struct KLTestResult {
  std::vector<KLRow> rows;
  std::size_t skipped = 0;
  double exceedance_fraction = 0.0;
};

// Observed residuals at the given parameters for events with x above the
// x_quantile point (n_obs x mp); x_quantile <= 0 keeps every event.
RowMatrixXd observed_residuals(const model::LaplaceDataset& data, const model::MSCEParams& params,
                               const model::ModelLayout& layout, double x_quantile);

KLTestResult kl_bootstrap_test(const model::LaplaceDataset& data, const model::MSCEParams& params,
                               const model::ModelLayout& layout, double x_quantile, int n_boot, int n_bins,
                               std::uint64_t seed);

}  // namespace msce::diagnostics
