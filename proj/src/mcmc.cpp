#include "msce/mcmc.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "msce/error.hpp"
#include "msce/log.hpp"
#include "msce/marginal.hpp"
#include "msce/parallel.hpp"

namespace msce::mcmc {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kTargetAcceptance = 0.44;

double uniform01(Rng& rng) { return std::generate_canonical<double, 53>(rng); }

// Running mean and covariance (Welford).
class RunningCovariance {
 public:
  explicit RunningCovariance(Eigen::Index d) : mean_(VectorXd::Zero(d)), m2_(MatrixXd::Zero(d, d)) {}
  void add(const VectorXd& x) {
    ++n_;
    const VectorXd delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_.noalias() += delta * (x - mean_).transpose();
  }
  std::size_t count() const { return n_; }
  MatrixXd covariance() const {
    return n_ > 1 ? MatrixXd(m2_ / static_cast<double>(n_ - 1)) : MatrixXd::Zero(m2_.rows(), m2_.cols());
  }

 private:
  std::size_t n_ = 0;
  VectorXd mean_;
  MatrixXd m2_;
};

}  // namespace

void MCMCConfig::validate() const {
  if (n1 < 1 || n2 < 1) throw std::invalid_argument("n1 and n2 must be at least 1");
  if (n_random_search < 1) throw std::invalid_argument("n_random_search must be at least 1");
  if (!(epsilon > 0.0 && epsilon < 1.0) && epsilon != 1.0)
    throw std::invalid_argument("epsilon must lie in (0, 1)");
  if (!(burn_in >= 0.0 && burn_in < 1.0)) throw std::invalid_argument("burn-in fraction must lie in [0, 1)");
  if (refresh_every < 1) throw std::invalid_argument("refresh period must be at least 1");
}

VectorXd random_search_init(const LogPosterior& logpost, const Bounds& bounds, const MCMCConfig& config, Rng& rng) {
  if (bounds.lower.size() != bounds.upper.size() || bounds.dim() == 0)
    throw std::invalid_argument("random_search_init: invalid bounds");
  if (((bounds.upper - bounds.lower).array() < 0.0).any())
    throw std::invalid_argument("random_search_init: lower bound above upper bound");
  const Eigen::Index d = bounds.dim();
  VectorXd best, x(d);
  double best_lp = kNegInf;
  for (int i = 0; i < config.n_random_search; ++i) {
    for (Eigen::Index c = 0; c < d; ++c) x(c) = bounds.lower(c) + (bounds.upper(c) - bounds.lower(c)) * uniform01(rng);
    const double lp = logpost(x);
    if (lp > best_lp) {
      best_lp = lp;
      best = x;
    }
  }
  if (!(best_lp > kNegInf))
    throw ComputationError("INIT_FAILED", "random search found no point with finite log-posterior in " +
                                              std::to_string(config.n_random_search) +
                                              " draws; lower the data threshold or widen the parameter bounds");
  return best;
}

WarmupResult gibbs_warmup(const LogPosterior& logpost, const VectorXd& start, const Bounds& bounds,
                          const MCMCConfig& config, Rng& rng) {
  const Eigen::Index d = start.size();
  if (bounds.dim() != d) throw std::invalid_argument("gibbs_warmup: bounds dimension mismatch");
  WarmupResult out;
  out.state = start;
  out.logpost = logpost(start);
  if (!std::isfinite(out.logpost)) throw std::invalid_argument("gibbs_warmup: start has non-finite log-posterior");
  const VectorXd width = bounds.upper - bounds.lower;
  VectorXd log_step(d);
  for (Eigen::Index c = 0; c < d; ++c)
    log_step(c) = !(width(c) > 0.0) ? kNegInf : std::log(std::isfinite(width(c)) ? 0.1 * width(c) : 1.0);
  VectorXd accepted = VectorXd::Zero(d);
  std::normal_distribution<double> normal;

  for (int t = 1; t <= config.n1; ++t) {
    const double gain = 1.0 / std::sqrt(static_cast<double>(t));
    for (Eigen::Index c = 0; c < d; ++c) {
      if (!(width(c) > 0.0)) continue;
      const double old = out.state(c);
      const double prop = old + std::exp(log_step(c)) * normal(rng);
      const double u = uniform01(rng);
      bool accept = false;
      if (prop >= bounds.lower(c) && prop <= bounds.upper(c)) {
        out.state(c) = prop;
        const double lp = logpost(out.state);
        if (lp > kNegInf && std::log(u) < lp - out.logpost) {
          accept = true;
          out.logpost = lp;
        } else {
          out.state(c) = old;
        }
      }
      if (accept) accepted(c) += 1.0;
      log_step(c) += gain * ((accept ? 1.0 : 0.0) - kTargetAcceptance);
    }
    out.states.push_back(out.state);
  }
  out.step = log_step.array().exp();
  out.acceptance = accepted / static_cast<double>(config.n1);
  return out;
}

PosteriorChain adaptive_chain(const LogPosterior& logpost, const WarmupResult& warmup, const MCMCConfig& config,
                              Rng& rng) {
  config.validate();
  const Eigen::Index d = warmup.state.size();
  const double dim = static_cast<double>(d);
  const double emp_scale = 2.38 / std::sqrt(dim);
  const double safe_scale = 0.1 / std::sqrt(dim);

  // Empirical covariance shrunk towards the warmup step sizes, weight d
  // pseudo-observations. Warmup states are left out, they are a transient.
  RunningCovariance cov(d);
  MatrixXd prior = MatrixXd::Zero(d, d);
  if (warmup.step.size() == d) prior.diagonal() = (warmup.step / 2.38).array().square().matrix();
  const double n0 = dim;

  PosteriorChain chain;
  chain.samples.reserve(static_cast<std::size_t>(config.n2));
  chain.logpost.reserve(static_cast<std::size_t>(config.n2));
  VectorXd state = warmup.state;
  double lp = warmup.logpost;
  MatrixXd chol;
  bool chol_ok = false;
  std::normal_distribution<double> normal;
  std::size_t accepted = 0;
  VectorXd noise(d), prop(d);

  for (int it = 0; it < config.n2; ++it) {
    if (it % config.refresh_every == 0 && config.epsilon < 1.0) {
      const double n = static_cast<double>(cov.count());
      MatrixXd s = n > 1.0 ? MatrixXd((n0 * prior + n * cov.covariance()) / (n0 + n)) : prior;
      s.diagonal().array() += 1e-10;
      Eigen::LLT<MatrixXd> llt(s);
      chol_ok = llt.info() == Eigen::Success && (n > 1.0 || warmup.step.size() == d);
      if (chol_ok) chol = llt.matrixL();
    }
    const bool use_emp = uniform01(rng) >= config.epsilon;
    for (Eigen::Index c = 0; c < d; ++c) noise(c) = normal(rng);
    if (use_emp && chol_ok) {
      prop = state + emp_scale * (chol * noise);
    } else {
      if (use_emp) {
        ++chain.covariance_fallbacks;
        if (chain.covariance_fallbacks == 1)
          log_warning("adaptive chain: empirical covariance not factorizable, using the fixed component");
      }
      prop = state + safe_scale * noise;
    }
    const double u = uniform01(rng);
    const double lp_prop = logpost(prop);
    if (lp_prop > kNegInf && std::log(u) < lp_prop - lp) {
      state = prop;
      lp = lp_prop;
      ++accepted;
    }
    chain.samples.push_back(state);
    chain.logpost.push_back(lp);
    cov.add(state);
  }
  chain.adaptive_acceptance = static_cast<double>(accepted) / static_cast<double>(config.n2);
  chain.warmup_acceptance = warmup.acceptance.size() > 0 ? warmup.acceptance.mean() : 0.0;
  chain.burn_in = static_cast<std::size_t>(std::floor(config.burn_in * config.n2));
  return chain;
}

PosteriorChain run_chain(const LogPosterior& logpost, const Bounds& bounds, const MCMCConfig& config) {
  config.validate();
  Rng init_rng(derive_seed(config.seed, "random-search"));
  const VectorXd start = random_search_init(logpost, bounds, config, init_rng);
  Rng warm_rng(derive_seed(config.seed, "gibbs-warmup"));
  const WarmupResult warm = gibbs_warmup(logpost, start, bounds, config, warm_rng);
  Rng chain_rng(derive_seed(config.seed, "adaptive"));
  PosteriorChain chain = adaptive_chain(logpost, warm, config, chain_rng);
  chain.seed = config.seed;
  return chain;
}

std::vector<PosteriorChain> run_chains(const std::function<LogPosterior()>& make, const Bounds& bounds,
                                       const MCMCConfig& config, int n_chains) {
  if (n_chains < 1) throw std::invalid_argument("need at least one chain");
  std::vector<PosteriorChain> chains(static_cast<std::size_t>(n_chains));
  if (n_chains == 1) {
    chains[0] = run_chain(make(), bounds, config);
    return chains;
  }
  parallel_for(
      chains.size(),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
          MCMCConfig c = config;
          c.seed = derive_seed(config.seed, static_cast<std::uint64_t>(i));
          chains[i] = run_chain(make(), bounds, c);
        }
      },
      1);
  return chains;
}

std::vector<VectorXd> retained(const PosteriorChain& chain) {
  const std::size_t start = chain.burn_in < chain.samples.size() ? chain.burn_in : 0;
  return {chain.samples.begin() + static_cast<std::ptrdiff_t>(start), chain.samples.end()};
}

ChainSummary summarize(const PosteriorChain& chain) {
  const std::vector<VectorXd> kept = retained(chain);
  if (kept.empty()) throw std::invalid_argument("summarize: empty chain");
  const Eigen::Index d = kept.front().size();
  ChainSummary s;
  s.used = kept.size();
  s.mean = VectorXd::Zero(d);
  s.median.resize(d);
  s.lo.resize(d);
  s.hi.resize(d);
  for (const auto& v : kept) s.mean += v;
  s.mean /= static_cast<double>(kept.size());
  std::vector<double> col(kept.size());
  for (Eigen::Index c = 0; c < d; ++c) {
    for (std::size_t i = 0; i < kept.size(); ++i) col[i] = kept[i](c);
    s.median(c) = marginal::sample_quantile(col, 0.5);
    s.lo(c) = marginal::sample_quantile(col, 0.025);
    s.hi(c) = marginal::sample_quantile(col, 0.975);
  }
  return s;
}

}  // namespace msce::mcmc
