#include "msce/marginal.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include "msce/distributions.hpp"
#include "msce/log.hpp"
#include "msce/parallel.hpp"
#include "msce/rng.hpp"
#include "msce/types.hpp"

namespace msce::marginal {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kPitTailFloor = 1e-12;

void check_angle(double a, const char* what) {
  if (!(a > 0.0 && a <= 360.0))
    throw std::invalid_argument(std::string(what) + " must lie in (0, 360], got " + std::to_string(a));
}

int partner_bin(int b0) { return (b0 + 8) % kBinCount; }  // 0-based, same octant other season

// Tail-fitting problem over parameter groups. Group g has a free log-scale
// when it has at least one exceedance.
struct TailProblem {
  std::vector<std::vector<double>> exceed;  // per group
  std::vector<int> bin_group;               // per bin (0-based), -1 when no data
  int n_groups = 0;
};

struct TailSolution {
  double xi = 0.0;
  std::vector<double> log_sigma;  // per group
  double objective = 0.0;
};

class TailObjective {
 public:
  TailObjective(const TailProblem& p, double lambda) : p_(p), lambda_(lambda) {
    for (int g = 0; g < p.n_groups; ++g)
      if (!p.exceed[static_cast<std::size_t>(g)].empty()) {
        slot_.push_back(g);
      }
    slot_of_.assign(static_cast<std::size_t>(p.n_groups), -1);
    for (std::size_t i = 0; i < slot_.size(); ++i) slot_of_[static_cast<std::size_t>(slot_[i])] = static_cast<int>(i);
    for (int b = 0; b < kBinCount; ++b) {
      const int g = p.bin_group[static_cast<std::size_t>(b)];
      if (g >= 0 && slot_of_[static_cast<std::size_t>(g)] >= 0) penalty_slots_.push_back(slot_of_[static_cast<std::size_t>(g)]);
    }
  }

  Eigen::Index dim() const { return static_cast<Eigen::Index>(slot_.size()) + 1; }
  const std::vector<int>& slots() const { return slot_; }

  double value(const VectorXd& th) const {
    const double xi = th(0);
    double f = 0.0;
    for (std::size_t i = 0; i < slot_.size(); ++i) {
      const double s = th(static_cast<Eigen::Index>(i) + 1);
      const double sigma = std::exp(s);
      for (double y : p_.exceed[static_cast<std::size_t>(slot_[i])]) {
        const double l = gp_logpdf(y, sigma, xi);
        if (!std::isfinite(l)) return kNegInf;
        f += l;
      }
    }
    return f - penalty(th);
  }

  VectorXd gradient(const VectorXd& th) const {
    const double xi = th(0);
    VectorXd g = VectorXd::Zero(dim());
    for (std::size_t i = 0; i < slot_.size(); ++i) {
      const Eigen::Index k = static_cast<Eigen::Index>(i) + 1;
      const double sigma = std::exp(th(k));
      for (double y : p_.exceed[static_cast<std::size_t>(slot_[i])]) {
        const double r = y / sigma;
        const double t = xi * r;
        g(k) += -1.0 + (1.0 + xi) * r / (1.0 + t);
        if (std::abs(xi) < 1e-6)
          g(0) += 0.5 * r * r - r;
        else
          g(0) += std::log1p(t) / (xi * xi) - (1.0 / xi + 1.0) * r / (1.0 + t);
      }
    }
    if (lambda_ > 0.0 && !penalty_slots_.empty()) {
      const double mean = penalty_mean(th);
      // d/ds_j of sum_b (s_g(b) - mean)^2 = 2 * sum_{b in j} (s_j - mean)
      // (the mean term cancels since deviations sum to zero).
      for (int slot : penalty_slots_) g(slot + 1) -= 2.0 * lambda_ * (th(slot + 1) - mean);
    }
    return g;
  }

  double penalty(const VectorXd& th) const {
    if (lambda_ <= 0.0 || penalty_slots_.empty()) return 0.0;
    const double mean = penalty_mean(th);
    double s = 0.0;
    for (int slot : penalty_slots_) s += (th(slot + 1) - mean) * (th(slot + 1) - mean);
    return lambda_ * s;
  }

  double penalty_mean(const VectorXd& th) const {
    double m = 0.0;
    for (int slot : penalty_slots_) m += th(slot + 1);
    return m / static_cast<double>(penalty_slots_.size());
  }

 private:
  const TailProblem& p_;
  double lambda_;
  std::vector<int> slot_;
  std::vector<int> slot_of_;
  std::vector<int> penalty_slots_;
};

MatrixXd fd_hessian(const TailObjective& obj, const VectorXd& th) {
  const Eigen::Index n = th.size();
  MatrixXd h(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double step = 1e-5 * (1.0 + std::abs(th(j)));
    VectorXd a = th, b = th;
    a(j) += step;
    b(j) -= step;
    h.col(j) = (obj.gradient(a) - obj.gradient(b)) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

// Levenberg-damped Newton ascent with the shape box handled as an
// active-set constraint.
TailSolution solve_tail(const TailProblem& problem, double lambda, const FitOptions& opt) {
  TailObjective obj(problem, lambda);
  if (obj.slots().empty()) throw ComputationError("NO_EXCEEDANCES", "no exceedances to fit");
  const Eigen::Index n = obj.dim();
  VectorXd th(n);
  th(0) = std::clamp(0.0, opt.xi_min, opt.xi_max);
  for (std::size_t i = 0; i < obj.slots().size(); ++i) {
    const auto& ex = problem.exceed[static_cast<std::size_t>(obj.slots()[i])];
    const double mean = std::accumulate(ex.begin(), ex.end(), 0.0) / static_cast<double>(ex.size());
    th(static_cast<Eigen::Index>(i) + 1) = std::log(std::max(mean, 1e-12));
  }
  double f = obj.value(th);
  if (!std::isfinite(f)) throw ComputationError("BAD_START", "GP fit: infeasible starting point");

  double mu = 0.0;
  bool converged = false;
  int iter = 0;
  for (; iter < opt.max_iterations; ++iter) {
    const VectorXd g = obj.gradient(th);
    MatrixXd a = -fd_hessian(obj, th);
    const bool xi_active = (th(0) <= opt.xi_min + 1e-12 && g(0) < 0.0) ||
                           (th(0) >= opt.xi_max - 1e-12 && g(0) > 0.0);
    VectorXd rhs = g;
    if (xi_active) {
      a.row(0).setZero();
      a.col(0).setZero();
      a(0, 0) = 1.0;
      rhs(0) = 0.0;
    }
    const double gnorm = rhs.lpNorm<Eigen::Infinity>();
    if (gnorm < 1e-9 * (1.0 + std::abs(f))) {
      converged = true;
      break;
    }
    bool accepted = false;
    VectorXd cand;
    double fc = f;
    for (int attempt = 0; attempt < 30 && !accepted; ++attempt) {
      MatrixXd damped = a;
      damped.diagonal().array() += mu;
      Eigen::LLT<MatrixXd> llt(damped);
      if (llt.info() != Eigen::Success) {
        mu = std::max(mu * 10.0, 1e-6 * (1.0 + a.diagonal().cwiseAbs().maxCoeff()));
        continue;
      }
      const VectorXd step = llt.solve(rhs);
      double t = 1.0;
      for (int bt = 0; bt < 40; ++bt, t *= 0.5) {
        cand = th + t * step;
        cand(0) = std::clamp(cand(0), opt.xi_min, opt.xi_max);
        fc = obj.value(cand);
        if (std::isfinite(fc) && fc >= f) {
          accepted = true;
          break;
        }
      }
      if (!accepted) mu = std::max(mu * 10.0, 1e-6 * (1.0 + a.diagonal().cwiseAbs().maxCoeff()));
    }
    if (!accepted) {
      // No ascent direction left at machine precision.
      converged = gnorm < 1e-4 * (1.0 + std::abs(f));
      break;
    }
    const double change = (cand - th).lpNorm<Eigen::Infinity>();
    const double gain = fc - f;
    th = cand;
    f = fc;
    mu *= 0.1;
    if (gain <= 1e-13 * (1.0 + std::abs(f)) && change < 1e-9) {
      converged = true;
      break;
    }
  }
  if (!converged) throw ConvergenceError("GP fit did not converge after " + std::to_string(iter) + " iterations", f);

  TailSolution sol;
  sol.xi = th(0);
  sol.objective = f;
  sol.log_sigma.assign(static_cast<std::size_t>(problem.n_groups), kNaN);
  double mean = 0.0;
  for (std::size_t i = 0; i < obj.slots().size(); ++i) {
    sol.log_sigma[static_cast<std::size_t>(obj.slots()[i])] = th(static_cast<Eigen::Index>(i) + 1);
    mean += th(static_cast<Eigen::Index>(i) + 1);
  }
  mean /= static_cast<double>(obj.slots().size());
  for (auto& s : sol.log_sigma)
    if (std::isnan(s)) s = mean;
  return sol;
}

// Group structure: group id per bin is the smallest bin index in the group.
struct Grouping {
  std::vector<int> group;                      // per bin, 0-based group id
  std::vector<std::vector<double>> values;     // per group id (indexed by bin index)
  std::vector<double> threshold;               // per group id
  std::vector<std::vector<double>> exceed;     // per group id
  std::vector<std::vector<double>> body;       // per group id, sorted
};

Grouping make_grouping(const BinnedSample& s, const std::vector<int>& group, double tau) {
  Grouping gr;
  gr.group = group;
  gr.values.assign(kBinCount, {});
  gr.threshold.assign(kBinCount, kNaN);
  gr.exceed.assign(kBinCount, {});
  gr.body.assign(kBinCount, {});
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int b = s.bins[i] - 1;
    if (b < 0 || b >= kBinCount) throw std::invalid_argument("bin id out of range: " + std::to_string(s.bins[i]));
    gr.values[static_cast<std::size_t>(group[static_cast<std::size_t>(b)])].push_back(s.values[i]);
  }
  for (int g = 0; g < kBinCount; ++g) {
    auto& v = gr.values[static_cast<std::size_t>(g)];
    if (v.empty()) continue;
    const double u = sample_quantile(v, tau);
    gr.threshold[static_cast<std::size_t>(g)] = u;
    for (double x : v) {
      if (x > u)
        gr.exceed[static_cast<std::size_t>(g)].push_back(x - u);
      else if (x < u)
        gr.body[static_cast<std::size_t>(g)].push_back(x);
    }
    std::sort(gr.body[static_cast<std::size_t>(g)].begin(), gr.body[static_cast<std::size_t>(g)].end());
  }
  return gr;
}

std::vector<int> merge_groups(std::vector<int> group, int a, int b) {
  const int ga = group[static_cast<std::size_t>(a)], gb = group[static_cast<std::size_t>(b)];
  const int keep = std::min(ga, gb), drop = std::max(ga, gb);
  for (auto& g : group)
    if (g == drop) g = keep;
  return group;
}

// Returns the first sparse bin (0-based) or -1.
int first_sparse(const Grouping& gr, std::size_t min_exceed) {
  for (int b = 0; b < kBinCount; ++b) {
    const int g = gr.group[static_cast<std::size_t>(b)];
    if (!gr.values[static_cast<std::size_t>(g)].empty() && gr.exceed[static_cast<std::size_t>(g)].size() < min_exceed)
      return b;
  }
  return -1;
}

Grouping choose_grouping(const BinnedSample& s, const FitOptions& opt) {
  std::vector<int> group(kBinCount);
  std::iota(group.begin(), group.end(), 0);
  Grouping gr = make_grouping(s, group, opt.tau);
  int sparse = first_sparse(gr, opt.min_exceedances);
  if (sparse < 0) return gr;
  if (!opt.merge_sparse_bins) {
    const int g = gr.group[static_cast<std::size_t>(sparse)];
    throw SparseBinError(sparse + 1, gr.exceed[static_cast<std::size_t>(g)].size(), opt.min_exceedances);
  }
  while (sparse >= 0) {
    const int partner = partner_bin(sparse);
    if (gr.group[static_cast<std::size_t>(sparse)] == gr.group[static_cast<std::size_t>(partner)]) break;
    group = merge_groups(gr.group, sparse, partner);
    gr = make_grouping(s, group, opt.tau);
    sparse = first_sparse(gr, opt.min_exceedances);
  }
  if (sparse >= 0) {
    std::fill(group.begin(), group.end(), 0);
    gr = make_grouping(s, group, opt.tau);
    sparse = first_sparse(gr, opt.min_exceedances);
    if (sparse >= 0)
      throw SparseBinError(sparse + 1, gr.exceed[0].size(), opt.min_exceedances);
  }
  return gr;
}

TailProblem make_problem(const Grouping& gr) {
  TailProblem p;
  p.n_groups = kBinCount;
  p.exceed = gr.exceed;
  p.bin_group.assign(kBinCount, -1);
  for (int b = 0; b < kBinCount; ++b) {
    const int g = gr.group[static_cast<std::size_t>(b)];
    if (!gr.values[static_cast<std::size_t>(g)].empty()) p.bin_group[static_cast<std::size_t>(b)] = g;
  }
  return p;
}

GPMarginalModel assemble(const Grouping& gr, const TailSolution& sol, const FitOptions& opt) {
  GPMarginalModel m;
  m.tau = opt.tau;
  m.xi = sol.xi;
  m.lambda = opt.lambda;
  m.objective = sol.objective;
  m.group = gr.group;
  m.threshold.assign(kBinCount, kNaN);
  m.sigma.assign(kBinCount, kNaN);
  m.body.assign(kBinCount, {});
  m.exceedances.assign(kBinCount, 0);
  for (int b = 0; b < kBinCount; ++b) {
    const auto g = static_cast<std::size_t>(gr.group[static_cast<std::size_t>(b)]);
    if (gr.values[g].empty()) continue;
    m.threshold[static_cast<std::size_t>(b)] = gr.threshold[g];
    m.sigma[static_cast<std::size_t>(b)] = std::exp(sol.log_sigma[g]);
    m.body[static_cast<std::size_t>(b)] = gr.body[g];
    m.exceedances[static_cast<std::size_t>(b)] = gr.exceed[g].size();
  }
  return m;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double uniform01(Rng& rng) { return std::generate_canonical<double, 53>(rng); }

// ---- empirical body --------------------------------------------------------

struct Body {
  const std::vector<double>& x;
  double u;
  double fallback_scale;

  double n1() const { return static_cast<double>(x.size()) + 1.0; }
  double low_scale() const {
    return x.empty() ? fallback_scale : std::max((u - x.front()) / static_cast<double>(x.size()), 1e-12);
  }
  std::size_t last_rank(double v) const {
    return static_cast<std::size_t>(std::upper_bound(x.begin(), x.end(), v) - x.begin());
  }

  // F_body(v) for v <= u.
  double cdf(double v) const {
    if (v >= u) return 1.0;
    if (x.empty()) return std::exp((v - u) / fallback_scale);
    const std::size_t k = last_rank(v);
    if (k == 0) {
      const double f1 = static_cast<double>(last_rank(x.front())) / n1();
      return f1 * std::exp((v - x.front()) / low_scale());
    }
    const double x_lo = x[k - 1];
    const double f_lo = static_cast<double>(k) / n1();
    double x_hi = u, f_hi = 1.0;
    if (k < x.size()) {
      x_hi = x[k];
      f_hi = static_cast<double>(last_rank(x_hi)) / n1();
    }
    return f_lo + (f_hi - f_lo) * (v - x_lo) / (x_hi - x_lo);
  }

  double quantile(double g) const {
    if (g >= 1.0) return u;
    if (x.empty()) return u + fallback_scale * std::log(g);
    const double target = g * n1();
    const double f1 = static_cast<double>(last_rank(x.front())) / n1();
    if (g < f1) return x.front() + low_scale() * std::log(g / f1);
    // Largest position i whose value's last rank is <= target.
    auto cand = static_cast<std::size_t>(std::min<double>(std::floor(target), static_cast<double>(x.size())));
    std::size_t i = cand - 1;
    if (last_rank(x[i]) > cand) {
      const auto first = static_cast<std::size_t>(std::lower_bound(x.begin(), x.end(), x[i]) - x.begin());
      i = first - 1;  // first > 0 because g >= f1
    }
    const double x_lo = x[i];
    const double f_lo = static_cast<double>(i + 1) / n1();
    double x_hi = u, f_hi = 1.0;
    if (i + 1 < x.size()) {
      x_hi = x[i + 1];
      f_hi = static_cast<double>(last_rank(x_hi)) / n1();
    }
    return x_lo + (x_hi - x_lo) * (g - f_lo) / (f_hi - f_lo);
  }
};

void check_bin(int bin, const GPMarginalModel& model) {
  if (bin < 1 || bin > kBinCount) throw std::invalid_argument("bin id out of range: " + std::to_string(bin));
  if (!model.has_data(bin)) throw std::invalid_argument("bin " + std::to_string(bin) + " has no fitted data");
}

}  // namespace

int octant(double direction_deg) {
  check_angle(direction_deg, "direction");
  const double c = std::ceil((direction_deg - 22.5) / 45.0);
  return static_cast<int>(c < 0.0 ? 0.0 : c) % 8;
}

int season_half(double season_deg) {
  check_angle(season_deg, "season");
  return (season_deg > 90.0 && season_deg <= 270.0) ? 1 : 0;
}

int assign_bin(double direction_deg, double season_deg, const BinScheme& scheme) {
  if (scheme.n_dir_bins != 8 || scheme.n_season_bins != 2)
    throw std::invalid_argument("only the 8 x 2 directional-seasonal scheme is supported");
  return season_half(season_deg) * 8 + octant(direction_deg) + 1;
}

bool GPMarginalModel::has_data(int bin) const {
  if (bin < 1 || bin > static_cast<int>(threshold.size())) return false;
  return std::isfinite(threshold[static_cast<std::size_t>(bin - 1)]);
}

double sample_quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw std::invalid_argument("sample_quantile: empty sample");
  if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("sample_quantile: prob outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0 || values[lo] == values[hi]) return values[lo];
  if (std::isinf(values[lo]) || std::isinf(values[hi])) return frac < 1.0 ? values[lo] : values[hi];
  return values[lo] + frac * (values[hi] - values[lo]);
}

GPMarginalModel fit_penalized_gp(const BinnedSample& sample, const FitOptions& options) {
  if (!(options.tau > 0.0 && options.tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
  if (!(options.lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (sample.values.size() != sample.bins.size()) throw std::invalid_argument("values and bins differ in length");
  if (sample.size() == 0) throw std::invalid_argument("fit_penalized_gp: empty sample");
  const Grouping gr = choose_grouping(sample, options);
  const TailProblem problem = make_problem(gr);
  const TailSolution sol = solve_tail(problem, options.lambda, options);
  return assemble(gr, sol, options);
}

double penalized_objective(const BinnedSample& sample, const std::vector<double>& thresholds, double xi,
                           const std::vector<double>& log_sigma, double lambda) {
  if (thresholds.size() != kBinCount || log_sigma.size() != kBinCount)
    throw std::invalid_argument("penalized_objective: expected 16 thresholds and scales");
  TailProblem p;
  p.n_groups = kBinCount;
  p.exceed.assign(kBinCount, {});
  p.bin_group.assign(kBinCount, -1);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto b = static_cast<std::size_t>(sample.bins[i] - 1);
    p.bin_group[b] = static_cast<int>(b);
    const double y = sample.values[i] - thresholds[b];
    if (y > 0.0) p.exceed[b].push_back(y);
  }
  TailObjective obj(p, lambda);
  VectorXd th(obj.dim());
  th(0) = xi;
  for (std::size_t i = 0; i < obj.slots().size(); ++i)
    th(static_cast<Eigen::Index>(i) + 1) = log_sigma[static_cast<std::size_t>(obj.slots()[i])];
  return obj.value(th);
}

std::vector<double> default_lambda_grid() {
  std::vector<double> g;
  for (int i = 0; i < 10; ++i) g.push_back(std::pow(10.0, -2.0 + 5.0 * i / 9.0));
  return g;
}

CrossValidationResult select_penalty_cv(const BinnedSample& sample, const FitOptions& options,
                                        const std::vector<double>& lambda_grid, int k_folds, std::uint64_t seed) {
  if (lambda_grid.empty()) throw std::invalid_argument("select_penalty_cv: empty lambda grid");
  if (k_folds < 2) throw std::invalid_argument("select_penalty_cv: need at least two folds");
  for (double l : lambda_grid)
    if (!(l >= 0.0)) throw std::invalid_argument("select_penalty_cv: lambda values must be non-negative");

  CrossValidationResult res;
  res.grid = lambda_grid;
  if (lambda_grid.size() == 1) {
    res.lambda = lambda_grid.front();
    res.scores.assign(1, kNaN);
    return res;
  }

  const Grouping gr = choose_grouping(sample, options);
  // Per-bin exceedances, stratified into folds.
  std::vector<std::vector<double>> bin_exceed(kBinCount);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto b = static_cast<std::size_t>(sample.bins[i] - 1);
    const double y = sample.values[i] - gr.threshold[static_cast<std::size_t>(gr.group[b])];
    if (y > 0.0) bin_exceed[b].push_back(y);
  }
  Rng rng(seed);
  std::vector<std::vector<int>> fold_of(kBinCount);
  for (int b = 0; b < kBinCount; ++b) {
    auto& f = fold_of[static_cast<std::size_t>(b)];
    f.resize(bin_exceed[static_cast<std::size_t>(b)].size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<int>(i % static_cast<std::size_t>(k_folds));
    std::shuffle(f.begin(), f.end(), rng);
  }
  const TailProblem full = make_problem(gr);

  const std::size_t n_tasks = lambda_grid.size() * static_cast<std::size_t>(k_folds);
  std::vector<double> loglik(n_tasks, 0.0);
  std::vector<std::size_t> count(n_tasks, 0), skipped(n_tasks, 0), outside(n_tasks, 0);
  std::vector<int> failed(n_tasks, 0);
  parallel_for(
      n_tasks,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t task = begin; task < end; ++task) {
          const double lambda = lambda_grid[task / static_cast<std::size_t>(k_folds)];
          const int fold = static_cast<int>(task % static_cast<std::size_t>(k_folds));
          TailProblem train = full;
          for (auto& e : train.exceed) e.clear();
          for (int b = 0; b < kBinCount; ++b) {
            const auto& ex = bin_exceed[static_cast<std::size_t>(b)];
            const auto g = static_cast<std::size_t>(gr.group[static_cast<std::size_t>(b)]);
            for (std::size_t i = 0; i < ex.size(); ++i)
              if (fold_of[static_cast<std::size_t>(b)][i] != fold) train.exceed[g].push_back(ex[i]);
          }
          TailSolution sol;
          try {
            sol = solve_tail(train, lambda, options);
          } catch (const Error&) {
            failed[task] = 1;
            continue;
          }
          for (int b = 0; b < kBinCount; ++b) {
            if (full.bin_group[static_cast<std::size_t>(b)] < 0) continue;
            const auto& ex = bin_exceed[static_cast<std::size_t>(b)];
            const double sigma = std::exp(sol.log_sigma[static_cast<std::size_t>(gr.group[static_cast<std::size_t>(b)])]);
            std::size_t held = 0;
            for (std::size_t i = 0; i < ex.size(); ++i) {
              if (fold_of[static_cast<std::size_t>(b)][i] != fold) continue;
              const double ll = gp_logpdf(ex[i], sigma, sol.xi);
              // beyond a negative-shape endpoint: counted, not summed
              if (std::isfinite(ll)) loglik[task] += ll;
              else ++outside[task];
              ++held;
            }
            if (held == 0) ++skipped[task];
            count[task] += held;
          }
        }
      },
      1);

  // Ranked by held-out points outside the fitted support, then by the mean
  // log-likelihood of the others. Reported scores are -inf when any point
  // fell outside.
  res.scores.assign(lambda_grid.size(), 0.0);
  double best = kNegInf;
  std::size_t best_outside = std::numeric_limits<std::size_t>::max();
  for (std::size_t l = 0; l < lambda_grid.size(); ++l) {
    double total = 0.0;
    std::size_t n = 0, out = 0;
    bool any_failed = false;
    for (int f = 0; f < k_folds; ++f) {
      const std::size_t task = l * static_cast<std::size_t>(k_folds) + static_cast<std::size_t>(f);
      total += loglik[task];
      n += count[task] - outside[task];
      out += outside[task];
      any_failed = any_failed || failed[task] != 0;
      if (l == 0) res.skipped_terms += skipped[task];
    }
    const double score = (any_failed || n == 0) ? kNegInf : total / static_cast<double>(n);
    res.scores[l] = out > 0 ? kNegInf : score;
    if (!std::isfinite(score)) continue;
    if (out < best_outside || (out == best_outside && score > best)) {
      best = score;
      best_outside = out;
      res.lambda = lambda_grid[l];
    }
  }
  if (!std::isfinite(best)) throw ComputationError("CV_FAILED", "cross-validation failed for every lambda");
  if (res.skipped_terms > 0)
    log_warning("cross-validation: skipped " + std::to_string(res.skipped_terms) + " empty held-out bin terms");
  return res;
}

MarginalEnsemble bootstrap_margins(const BinnedSample& sample, const BootstrapOptions& options) {
  if (options.n_boot < 1) throw std::invalid_argument("bootstrap_margins: n_boot must be at least 1");
  if (!(options.tau_lo > 0.0 && options.tau_hi < 1.0 && options.tau_lo <= options.tau_hi))
    throw std::invalid_argument("bootstrap_margins: invalid tau range");
  const auto n_boot = static_cast<std::size_t>(options.n_boot);
  std::vector<GPMarginalModel> fits(n_boot);
  std::vector<int> ok(n_boot, 0);
  parallel_for(
      n_boot,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b) {
          Rng rng(derive_seed(options.seed, b));
          BinnedSample resampled;
          if (options.resample) {
            std::uniform_int_distribution<std::size_t> pick(0, sample.size() - 1);
            for (std::size_t i = 0; i < sample.size(); ++i) {
              const std::size_t j = pick(rng);
              resampled.push(sample.values[j], sample.bins[j]);
            }
          } else {
            resampled = sample;
          }
          FitOptions fo = options.fit;
          fo.tau = options.tau_lo + (options.tau_hi - options.tau_lo) * uniform01(rng);
          try {
            fits[b] = fit_penalized_gp(resampled, fo);
            fits[b].seed = derive_seed(options.seed, b);
            ok[b] = 1;
          } catch (const Error& e) {
            log_warning(std::string("bootstrap member dropped: ") + e.what());
          }
        }
      },
      1);

  MarginalEnsemble ens;
  for (std::size_t b = 0; b < n_boot; ++b) {
    if (ok[b])
      ens.members.push_back(std::move(fits[b]));
    else
      ++ens.failures;
  }
  if (static_cast<double>(ens.failures) > 0.2 * static_cast<double>(n_boot) || ens.members.empty())
    throw ComputationError("BOOTSTRAP_FAILED", std::to_string(ens.failures) + " of " + std::to_string(n_boot) +
                                                   " bootstrap fits failed");

  std::vector<double> taus, xis;
  for (const auto& m : ens.members) {
    taus.push_back(m.tau);
    xis.push_back(m.xi);
  }
  FitOptions structure = options.fit;
  structure.tau = median_of(taus);
  GPMarginalModel med = fit_penalized_gp(sample, structure);
  med.seed = options.seed;
  med.xi = median_of(xis);
  for (int b = 0; b < kBinCount; ++b) {
    std::vector<double> us, ss;
    for (const auto& m : ens.members)
      if (m.has_data(b + 1)) {
        us.push_back(m.threshold[static_cast<std::size_t>(b)]);
        ss.push_back(m.sigma[static_cast<std::size_t>(b)]);
      }
    if (!med.has_data(b + 1) || us.empty()) continue;
    med.threshold[static_cast<std::size_t>(b)] = median_of(us);
    med.sigma[static_cast<std::size_t>(b)] = median_of(ss);
  }
  // Bodies rebuilt below the median thresholds from the original sample.
  for (int b = 0; b < kBinCount; ++b) {
    if (!med.has_data(b + 1)) continue;
    auto& body = med.body[static_cast<std::size_t>(b)];
    body.clear();
    std::size_t n_exc = 0;
    const double u = med.threshold[static_cast<std::size_t>(b)];
    for (std::size_t i = 0; i < sample.size(); ++i) {
      if (med.group[static_cast<std::size_t>(sample.bins[i] - 1)] != med.group[static_cast<std::size_t>(b)]) continue;
      if (sample.values[i] < u) body.push_back(sample.values[i]);
      if (sample.values[i] > u) ++n_exc;
    }
    std::sort(body.begin(), body.end());
    med.exceedances[static_cast<std::size_t>(b)] = n_exc;
  }
  ens.median_model = std::move(med);
  return ens;
}

Probability marginal_cdf(double value, int bin, const GPMarginalModel& model) {
  check_bin(bin, model);
  const auto b = static_cast<std::size_t>(bin - 1);
  const double u = model.threshold[b], sigma = model.sigma[b];
  if (value > u) {
    double upper = (1.0 - model.tau) * gp_survival(value - u, sigma, model.xi);
    if (upper < kPitTailFloor) {
      log_warning("PIT: value " + std::to_string(value) + " beyond the fitted tail in bin " + std::to_string(bin) +
                  "; probability clamped");
      upper = kPitTailFloor;
    }
    return {1.0 - upper, upper};
  }
  const Body body{model.body[b], u, sigma};
  const double lower = model.tau * body.cdf(value);
  return {lower, 1.0 - lower};
}

double marginal_quantile(const Probability& p, int bin, const GPMarginalModel& model) {
  check_bin(bin, model);
  const auto b = static_cast<std::size_t>(bin - 1);
  const double u = model.threshold[b], sigma = model.sigma[b];
  const double tail = 1.0 - model.tau;
  if (p.upper < tail) {
    const double s = p.upper / tail;  // GP survival probability
    const double y = std::abs(model.xi) < kGpExponentialLimit ? -sigma * std::log(s)
                                                               : sigma * std::expm1(-model.xi * std::log(s)) / model.xi;
    return u + y;
  }
  const Body body{model.body[b], u, sigma};
  return body.quantile(p.lower / model.tau);
}

double pit_to_laplace(double value, int bin, const GPMarginalModel& model) {
  const Probability p = marginal_cdf(value, bin, model);
  if (p.lower <= 0.0) throw std::domain_error("PIT: probability underflow far below the body");
  return p.upper < 0.5 ? std_laplace_quantile_upper(p.upper) : std_laplace_quantile(p.lower);
}

double laplace_to_physical(double x, int bin, const GPMarginalModel& model) {
  const Probability p = x >= 0.0 ? Probability{1.0 - 0.5 * std::exp(-x), 0.5 * std::exp(-x)}
                                 : Probability{0.5 * std::exp(x), 1.0 - 0.5 * std::exp(x)};
  return marginal_quantile(p, bin, model);
}

ReturnLevelSummary return_level_sim(const GPMarginalModel& model, const std::vector<double>& rates, double n_years,
                                    int n_sims, std::uint64_t seed) {
  if (rates.size() != kBinCount) throw std::invalid_argument("return_level_sim: need 16 bin rates");
  if (n_sims < 100) throw std::invalid_argument("return_level_sim: n_sims must be at least 100");
  if (!(n_years > 0.0)) throw std::invalid_argument("return_level_sim: n_years must be positive");
  if (model.xi >= 1.0) throw ComputationError("INFINITE_MEAN_TAIL", "return_level_sim: xi >= 1 gives an infinite-mean tail");
  bool any = false;
  for (int b = 0; b < kBinCount; ++b) {
    const double r = rates[static_cast<std::size_t>(b)];
    if (!(r >= 0.0) || !std::isfinite(r)) throw std::invalid_argument("return_level_sim: rates must be non-negative");
    if (r > 0.0 && model.has_data(b + 1)) any = true;
  }
  if (!any) throw std::invalid_argument("return_level_sim: no bin has both a positive rate and fitted data");

  Rng rng(seed);
  ReturnLevelSummary out;
  out.maxima.resize(static_cast<std::size_t>(n_sims));
  for (int s = 0; s < n_sims; ++s) {
    double mx = kNegInf;
    for (int b = 0; b < kBinCount; ++b) {
      const double r = rates[static_cast<std::size_t>(b)];
      if (r <= 0.0 || !model.has_data(b + 1)) continue;
      std::poisson_distribution<long long> pois(r * n_years);
      const long long n = pois(rng);
      if (n <= 0) continue;
      // The maximum of n draws has CDF F^n.
      double uu = uniform01(rng);
      if (uu <= 0.0) uu = std::numeric_limits<double>::min();
      const double lu = std::log(uu) / static_cast<double>(n);
      const Probability p{std::exp(lu), -std::expm1(lu)};
      mx = std::max(mx, marginal_quantile(p, b + 1, model));
    }
    out.maxima[static_cast<std::size_t>(s)] = mx;
  }
  out.q025 = sample_quantile(out.maxima, 0.025);
  out.q50 = sample_quantile(out.maxima, 0.5);
  out.q975 = sample_quantile(out.maxima, 0.975);
  return out;
}

}  // namespace msce::marginal
