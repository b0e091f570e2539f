#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "msce/rng.hpp"
#include "msce/types.hpp"

namespace msce::mcmc {

using LogPosterior = std::function<double(const VectorXd&)>;

struct Bounds {
  VectorXd lower;
  VectorXd upper;
  Eigen::Index dim() const { return lower.size(); }
};

struct MCMCConfig {
  int n1 = 250;
  int n2 = 19750;
  int n_random_search = 2000;
  double epsilon = 0.05;
  double burn_in = 0.25;     // fraction of the adaptive phase discarded
  int refresh_every = 50;    // empirical-covariance refactorization period
  std::uint64_t seed = 0;

  // Throws std::invalid_argument.
  void validate() const;
};

// Best of n_random_search uniform draws inside the bounds.
// Throws ComputationError (INIT_FAILED) when every draw has log-posterior -inf.
VectorXd random_search_init(const LogPosterior& logpost, const Bounds& bounds, const MCMCConfig& config, Rng& rng);

struct WarmupResult {
  VectorXd state;
  double logpost = 0.0;
  VectorXd step;                 // adapted per-coordinate scales
  VectorXd acceptance;           // per-coordinate acceptance over all sweeps
  std::vector<VectorXd> states;  // state after each sweep
};

// Metropolis-within-Gibbs: n1 sweeps of univariate Gaussian updates with
// scales adapted towards 0.44 acceptance. Coordinates with zero-width
// bounds are never moved.
WarmupResult gibbs_warmup(const LogPosterior& logpost, const VectorXd& start, const Bounds& bounds,
                          const MCMCConfig& config, Rng& rng);

struct PosteriorChain {
  std::vector<VectorXd> samples;  // adaptive-phase states, one per iteration
  std::vector<double> logpost;
  double warmup_acceptance = 0.0;
  double adaptive_acceptance = 0.0;
  std::size_t burn_in = 0;
  std::size_t covariance_fallbacks = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }
};

// Joint adaptive Metropolis for n2 iterations. Each iteration draws, in
// order: one uniform choosing the mixture component (the empirical one
// when u >= epsilon), dim standard normals, one uniform for acceptance.
// The empirical covariance of the chain so far is blended with
// diag((warmup.step / 2.38)^2) at a weight of dim pseudo-observations.
PosteriorChain adaptive_chain(const LogPosterior& logpost, const WarmupResult& warmup, const MCMCConfig& config,
                              Rng& rng);

// Random search, warmup and adaptive phase with stage seeds derived from
// config.seed.
PosteriorChain run_chain(const LogPosterior& logpost, const Bounds& bounds, const MCMCConfig& config);

// Independent chains with seeds derived from config.seed and the chain
// index, run in parallel; make() supplies one log-posterior per chain.
std::vector<PosteriorChain> run_chains(const std::function<LogPosterior()>& make, const Bounds& bounds,
                                       const MCMCConfig& config, int n_chains);

struct ChainSummary {
  VectorXd mean;
  VectorXd median;
  VectorXd lo;  // 2.5 %
  VectorXd hi;  // 97.5 %
  std::size_t used = 0;
};

// Summary over the post-burn-in samples (all samples when fewer remain).
ChainSummary summarize(const PosteriorChain& chain);
// Post-burn-in samples.
std::vector<VectorXd> retained(const PosteriorChain& chain);

}  // namespace msce::mcmc
