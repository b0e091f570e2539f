#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "msce/error.hpp"

namespace msce::marginal {

inline constexpr int kBinCount = 16;

// Eight directional octants centred on N, NE, ..., NW (boundaries at
// 22.5 + 45 k, lower-exclusive / upper-inclusive) crossed with a winter
// half (270, 90] and a summer half (90, 270] of the seasonal circle.
struct BinScheme {
  int n_dir_bins = 8;
  int n_season_bins = 2;
  int bin_count() const { return n_dir_bins * n_season_bins; }
};

// 0 = N, 1 = NE, ..., 7 = NW.
int octant(double direction_deg);
// 0 = winter, 1 = summer.
int season_half(double season_deg);
// Bin id in 1..16: season_half * 8 + octant + 1. Throws
// std::invalid_argument for angles outside (0, 360].
int assign_bin(double direction_deg, double season_deg, const BinScheme& scheme = {});

struct BinnedSample {
  std::vector<double> values;
  std::vector<int> bins;  // 1..16, parallel to values

  std::size_t size() const { return values.size(); }
  void push(double v, int bin) {
    values.push_back(v);
    bins.push_back(bin);
  }
};

class SparseBinError : public Error {
 public:
  SparseBinError(int bin, std::size_t exceedances, std::size_t required)
      : Error(ErrorKind::computation, "SPARSE_BIN",
              "bin " + std::to_string(bin) + " has " + std::to_string(exceedances) +
                  " exceedances, fewer than the " + std::to_string(required) +
                  " required; merge it with a neighbouring bin"),
        bin_(bin) {}
  int bin() const { return bin_; }

 private:
  int bin_;
};

struct FitOptions {
  double tau = 0.7;
  double lambda = 0.0;
  std::size_t min_exceedances = 20;
  double xi_min = -0.5;
  double xi_max = 0.5;
  int max_iterations = 500;
  // Merge sparse bins with their seasonal partner, then into a single
  // stationary bin, instead of raising SparseBinError.
  bool merge_sparse_bins = false;
};

// Piecewise-constant GP tail per directional-seasonal bin with a common
// shape and an empirical body below each threshold. Bins may share
// parameters through `group` after sparse-bin merging.
struct GPMarginalModel {
  BinScheme scheme;
  double tau = 0.7;
  double xi = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::vector<int> group;                 // per bin, index of its parameter group
  std::vector<double> threshold;          // per bin, NaN when the bin has no data
  std::vector<double> sigma;              // per bin GP scale
  std::vector<std::vector<double>> body;  // per bin, sorted sub-threshold values
  std::vector<std::size_t> exceedances;   // per bin (of its group)
  double objective = 0.0;                 // penalised log-likelihood at the optimum

  bool has_data(int bin) const;
};

// Type-7 sample quantile.
double sample_quantile(std::vector<double> values, double prob);

GPMarginalModel fit_penalized_gp(const BinnedSample& sample, const FitOptions& options);

// Penalised objective for explicit parameters on the sample's exceedances
// above the supplied per-bin thresholds (bins indexed 1..16).
double penalized_objective(const BinnedSample& sample, const std::vector<double>& thresholds,
                           double xi, const std::vector<double>& log_sigma, double lambda);

struct CrossValidationResult {
  double lambda = 0.0;
  std::vector<double> grid;
  std::vector<double> scores;  // mean held-out GP log-likelihood per exceedance
  std::size_t skipped_terms = 0;
};

// Ten log-spaced values from 1e-2 to 1e3.
std::vector<double> default_lambda_grid();

CrossValidationResult select_penalty_cv(const BinnedSample& sample, const FitOptions& options,
                                        const std::vector<double>& lambda_grid, int k_folds,
                                        std::uint64_t seed);

struct BootstrapOptions {
  int n_boot = 100;
  double tau_lo = 0.6;
  double tau_hi = 0.8;
  bool resample = true;
  std::uint64_t seed = 0;
  FitOptions fit;  // tau is drawn per member
};

struct MarginalEnsemble {
  std::vector<GPMarginalModel> members;
  GPMarginalModel median_model;
  std::size_t failures = 0;
};

MarginalEnsemble bootstrap_margins(const BinnedSample& sample, const BootstrapOptions& options);

// Probability integral transform to standard Laplace scale and back.
double pit_to_laplace(double value, int bin, const GPMarginalModel& model);
double laplace_to_physical(double x, int bin, const GPMarginalModel& model);

// Non-exceedance probability pair of the fitted marginal distribution.
struct Probability {
  double lower;
  double upper;
};
Probability marginal_cdf(double value, int bin, const GPMarginalModel& model);
double marginal_quantile(const Probability& p, int bin, const GPMarginalModel& model);

struct ReturnLevelSummary {
  double q025 = 0.0;
  double q50 = 0.0;
  double q975 = 0.0;
  std::vector<double> maxima;  // one per simulation, -inf when no event occurred
};

// rates: expected events per year in each of the 16 bins.
ReturnLevelSummary return_level_sim(const GPMarginalModel& model, const std::vector<double>& rates,
                                    double n_years, int n_sims, std::uint64_t seed);

}  // namespace msce::marginal
