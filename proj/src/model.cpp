#include "msce/model.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include "msce/error.hpp"
#include "msce/parallel.hpp"
#include "msce/special.hpp"

namespace msce::model {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_pair(int j, int k, int p, int m) {
  if (j < 1 || j > p || k < 1 || k > m)
    throw std::out_of_range("remote pair (" + std::to_string(j) + ", " + std::to_string(k) + ") outside 1.." +
                            std::to_string(p) + " x 1.." + std::to_string(m));
}

std::size_t n_pairs(int m, bool with_diagonal) {
  const auto mm = static_cast<std::size_t>(m);
  return with_diagonal ? mm * (mm + 1) / 2 : mm * (mm - 1) / 2;
}

}  // namespace

int RemoteIndex::position(int j, int k) const {
  check_pair(j, k, p, m);
  return p * (k - 1) + j;
}

int RemoteIndex::extended_position(int j, int k) const {
  if (j == 0 && k == 1) return 0;
  return position(j, k);
}

std::pair<int, int> RemoteIndex::pair_at(int a) const {
  if (a == 0) return {0, 1};
  if (a < 0 || a > size()) throw std::out_of_range("extended position out of range: " + std::to_string(a));
  return {(a - 1) % p + 1, (a - 1) / p + 1};
}

PiecewiseLinearFn::PiecewiseLinearFn(std::vector<double> node_distances, std::vector<double> node_values)
    : nodes_(std::move(node_distances)), values_(std::move(node_values)) {
  if (nodes_.empty() || nodes_.size() != values_.size())
    throw std::invalid_argument("piecewise-linear function needs matching, non-empty nodes and values");
  for (std::size_t i = 1; i < nodes_.size(); ++i)
    if (!(nodes_[i] > nodes_[i - 1])) throw std::invalid_argument("node distances must be strictly increasing");
}

double PiecewiseLinearFn::operator()(double d) const {
  if (d <= nodes_.front()) return values_.front();
  if (d >= nodes_.back()) return values_.back();
  const auto it = std::upper_bound(nodes_.begin(), nodes_.end(), d);
  const auto hi = static_cast<std::size_t>(it - nodes_.begin());
  const std::size_t lo = hi - 1;
  const double h = nodes_[hi] - nodes_[lo];
  const double h_lower = nodes_[hi] - d;  // weight of the lower node
  const double h_upper = d - nodes_[lo];
  return (h_lower * values_[lo] + h_upper * values_[hi]) / h;
}

double ModelLayout::location_km(int a) const {
  if (a == 0) return 0.0;
  return remote_km[static_cast<std::size_t>((a - 1) % p)];
}

ModelLayout make_layout(const std::vector<double>& distances, int m, int n_nod) {
  if (distances.size() < 2) throw std::invalid_argument("layout needs r_0 and at least one remote location");
  if (distances.front() != 0.0) throw std::invalid_argument("first transect distance must be 0 (r_0)");
  if (m < 1) throw std::invalid_argument("need at least one quantity");
  if (n_nod < 1) throw std::invalid_argument("need at least one node");
  for (std::size_t i = 1; i < distances.size(); ++i)
    if (!(distances[i] > distances[i - 1])) throw std::invalid_argument("transect distances must increase");
  ModelLayout l;
  l.m = m;
  l.p = static_cast<int>(distances.size()) - 1;
  l.n_nod = n_nod;
  l.remote_km.assign(distances.begin() + 1, distances.end());
  if (n_nod > 1 && l.p < 2) throw std::invalid_argument("more than one node needs at least two remote locations");
  const double d1 = l.remote_km.front(), dp = l.remote_km.back();
  for (int i = 0; i < n_nod; ++i)
    l.node_km.push_back(n_nod == 1 ? d1 : d1 + (dp - d1) * i / (n_nod - 1));
  const auto np = static_cast<Eigen::Index>(distances.size());
  l.pairwise_km.resize(np, np);
  for (Eigen::Index a = 0; a < np; ++a)
    for (Eigen::Index b = 0; b < np; ++b)
      l.pairwise_km(a, b) = std::abs(distances[static_cast<std::size_t>(a)] - distances[static_cast<std::size_t>(b)]);
  return l;
}

ModelLayout make_layout(const geo::Transect& transect, int m, int n_nod) {
  const VectorXd& d = transect.distances_km();
  ModelLayout l = make_layout(std::vector<double>(d.data(), d.data() + d.size()), m, n_nod);
  l.pairwise_km = transect.pairwise_km();
  return l;
}

std::size_t pair_offset(int k, int k2, int m, bool with_diagonal) {
  if (k > k2) std::swap(k, k2);
  if (k < 0 || k2 >= m || (!with_diagonal && k == k2)) throw std::out_of_range("quantity pair out of range");
  // Rows 0..k-1 hold (m - r) or (m - r - 1) entries.
  std::size_t off = 0;
  for (int r = 0; r < k; ++r) off += static_cast<std::size_t>(with_diagonal ? m - r : m - r - 1);
  return off + static_cast<std::size_t>(with_diagonal ? k2 - k : k2 - k - 1);
}

MSCEParams MSCEParams::filled(int m, int n_nod) {
  MSCEParams p;
  p.m = m;
  p.n_nod = n_nod;
  const std::vector<std::vector<double>> grid(static_cast<std::size_t>(m), std::vector<double>(static_cast<std::size_t>(n_nod)));
  p.alpha = p.beta = p.mu = p.sigma = p.delta = grid;
  for (auto& v : p.alpha) std::fill(v.begin(), v.end(), 0.5);
  for (auto& v : p.sigma) std::fill(v.begin(), v.end(), 1.0);
  for (auto& v : p.delta) std::fill(v.begin(), v.end(), 1.5);
  p.lambda.assign(n_pairs(m, false), 0.5);
  p.rho.assign(n_pairs(m, true), 0.5);
  p.kappa.assign(n_pairs(m, true), 0.2);
  return p;
}

std::size_t MSCEParams::packed_size(int m, int n_nod) {
  return static_cast<std::size_t>(5 * m * n_nod) + n_pairs(m, false) + 2 * n_pairs(m, true);
}

VectorXd MSCEParams::pack() const {
  VectorXd v(static_cast<Eigen::Index>(packed_size(m, n_nod)));
  Eigen::Index i = 0;
  for (const auto* block : {&alpha, &beta, &mu, &sigma, &delta}) {
    if (block->size() != static_cast<std::size_t>(m)) throw std::invalid_argument("node block has wrong quantity count");
    for (const auto& row : *block) {
      if (row.size() != static_cast<std::size_t>(n_nod)) throw std::invalid_argument("node block has wrong node count");
      for (double x : row) v(i++) = x;
    }
  }
  if (lambda.size() != n_pairs(m, false) || rho.size() != n_pairs(m, true) || kappa.size() != n_pairs(m, true))
    throw std::invalid_argument("dependence parameter blocks have wrong length");
  for (const auto* block : {&lambda, &rho, &kappa})
    for (double x : *block) v(i++) = x;
  return v;
}

MSCEParams MSCEParams::unpack(const VectorXd& theta, int m, int n_nod) {
  if (static_cast<std::size_t>(theta.size()) != packed_size(m, n_nod))
    throw std::invalid_argument("packed parameter vector has length " + std::to_string(theta.size()) + ", expected " +
                                std::to_string(packed_size(m, n_nod)));
  MSCEParams p = filled(m, n_nod);
  Eigen::Index i = 0;
  for (auto* block : {&p.alpha, &p.beta, &p.mu, &p.sigma, &p.delta})
    for (auto& row : *block)
      for (double& x : row) x = theta(i++);
  for (auto* block : {&p.lambda, &p.rho, &p.kappa})
    for (double& x : *block) x = theta(i++);
  return p;
}

double MSCEParams::lambda_of(int k, int k2) const {
  return k == k2 ? 1.0 : lambda[pair_offset(k, k2, m, false)];
}
double MSCEParams::rho_of(int k, int k2) const { return rho[pair_offset(k, k2, m, true)]; }
double MSCEParams::kappa_of(int k, int k2) const { return kappa[pair_offset(k, k2, m, true)]; }

std::vector<std::string> parameter_names(int m, int n_nod) {
  std::vector<std::string> names;
  for (const char* block : {"alpha", "beta", "mu", "sigma", "delta"})
    for (int k = 1; k <= m; ++k)
      for (int l = 1; l <= n_nod; ++l)
        names.push_back(std::string(block) + "_q" + std::to_string(k) + "_n" + std::to_string(l));
  for (int k = 1; k <= m; ++k)
    for (int k2 = k + 1; k2 <= m; ++k2) names.push_back("lambda_" + std::to_string(k) + std::to_string(k2));
  for (const char* block : {"rho", "kappa"})
    for (int k = 1; k <= m; ++k)
      for (int k2 = k; k2 <= m; ++k2) names.push_back(std::string(block) + "_" + std::to_string(k) + std::to_string(k2));
  return names;
}

bool ParamBounds::contains(const VectorXd& theta) const {
  if (theta.size() != lower.size()) return false;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double t = theta(i);
    if (!(t <= upper(i))) return false;
    if (lower_open[static_cast<std::size_t>(i)] ? !(t > lower(i)) : !(t >= lower(i))) return false;
  }
  return true;
}

ParamBounds parameter_bounds(int m, int n_nod) {
  const auto n = static_cast<Eigen::Index>(MSCEParams::packed_size(m, n_nod));
  ParamBounds b;
  b.lower.resize(n);
  b.upper.resize(n);
  b.lower_open.assign(static_cast<std::size_t>(n), false);
  Eigen::Index i = 0;
  auto fill = [&](std::size_t count, double lo, double hi, bool open) {
    for (std::size_t c = 0; c < count; ++c, ++i) {
      b.lower(i) = lo;
      b.upper(i) = hi;
      b.lower_open[static_cast<std::size_t>(i)] = open;
    }
  };
  const auto nodes = static_cast<std::size_t>(m * n_nod);
  fill(nodes, 0.0, 2.0, true);    // alpha
  fill(nodes, -5.0, 1.0, false);  // beta
  fill(nodes, -5.0, 5.0, false);  // mu
  fill(nodes, 0.0, 5.0, true);    // sigma
  fill(nodes, 0.1, 5.0, false);   // delta
  fill(n_pairs(m, false), 0.0, 1.0, true);
  fill(n_pairs(m, true), 0.0, 1.0, true);
  fill(n_pairs(m, true), 0.0, 1.0, true);
  return b;
}

NodeProfiles profiles(const MSCEParams& params, const ModelLayout& layout) {
  NodeProfiles out;
  for (int k = 0; k < params.m; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    out.alpha.emplace_back(layout.node_km, params.alpha[kk]);
    out.beta.emplace_back(layout.node_km, params.beta[kk]);
    out.mu.emplace_back(layout.node_km, params.mu[kk]);
    out.sigma.emplace_back(layout.node_km, params.sigma[kk]);
    out.delta.emplace_back(layout.node_km, params.delta[kk]);
  }
  return out;
}

MatrixXd unconditional_corr(const MSCEParams& params, const ModelLayout& layout) {
  if (params.m != layout.m || params.n_nod != layout.n_nod) throw std::invalid_argument("parameters do not match layout");
  const RemoteIndex idx = layout.index();
  const int n = idx.size() + 1;
  MatrixXd s(n, n);
  for (int a = 0; a < n; ++a) {
    const auto [ja, ka] = idx.pair_at(a);
    s(a, a) = 1.0;
    for (int b = a + 1; b < n; ++b) {
      const auto [jb, kb] = idx.pair_at(b);
      const double rho = params.rho_of(ka - 1, kb - 1) * layout.rho_unit_km;
      const double kappa = params.kappa_of(ka - 1, kb - 1) * layout.kappa_unit;
      const double dist = layout.pairwise_km(ja, jb);
      const double decay = dist == 0.0 ? 1.0 : std::exp(-std::pow(dist / rho, kappa));
      const double v = std::pow(params.lambda_of(ka - 1, kb - 1), std::abs(ka - kb)) * decay;
      s(a, b) = v;
      s(b, a) = v;
    }
  }
  return s;
}

MatrixXd conditional_corr(const MatrixXd& sigma_star) {
  const Eigen::Index n = sigma_star.rows() - 1;
  if (n < 1 || sigma_star.cols() != sigma_star.rows())
    throw std::invalid_argument("conditional_corr: need a square matrix with at least two rows");
  VectorXd root(n);
  for (Eigen::Index a = 0; a < n; ++a) {
    const double c = sigma_star(a + 1, 0);
    const double r = 1.0 - c * c;
    if (!(r > 0.0))
      throw ComputationError("DEGENERATE_CONDITIONING",
                             "remote variate " + std::to_string(a + 1) + " is perfectly correlated with the conditioning variate");
    root(a) = std::sqrt(r);
  }
  MatrixXd out(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    out(a, a) = 1.0;
    for (Eigen::Index b = a + 1; b < n; ++b) {
      const double v = (sigma_star(a + 1, b + 1) - sigma_star(a + 1, 0) * sigma_star(0, b + 1)) / (root(a) * root(b));
      out(a, b) = v;
      out(b, a) = v;
    }
  }
  return out;
}

void LaplaceDataset::validate(const ModelLayout& layout) const {
  if (x.size() == 0) throw std::invalid_argument("dataset has no events");
  if (y.rows() != x.size() || y.cols() != layout.p * layout.m)
    throw std::invalid_argument("dataset shape " + std::to_string(y.rows()) + " x " + std::to_string(y.cols()) +
                                " does not match " + std::to_string(x.size()) + " events x " +
                                std::to_string(layout.p * layout.m) + " remote pairs");
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (!(x(i) > u))
      throw std::invalid_argument("conditioning value of event " + std::to_string(i + 1) + " is not above u = " +
                                  std::to_string(u));
  if (!y.allFinite()) throw std::invalid_argument("dataset contains non-finite remote values");
}

std::vector<ColumnParams> column_params(const MSCEParams& params, const ModelLayout& layout) {
  const NodeProfiles prof = profiles(params, layout);
  std::vector<ColumnParams> out;
  for (int k = 0; k < layout.m; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    for (int j = 0; j < layout.p; ++j) {
      const double d = layout.remote_km[static_cast<std::size_t>(j)];
      out.push_back({prof.alpha[kk](d), prof.beta[kk](d), prof.mu[kk](d), prof.sigma[kk](d), prof.delta[kk](d)});
    }
  }
  return out;
}

MSCEPosterior::MSCEPosterior(ModelLayout layout, LaplaceDataset data)
    : layout_(std::move(layout)), data_(std::move(data)), bounds_(parameter_bounds(layout_.m, layout_.n_nod)) {
  data_.validate(layout_);
  log_x_ = data_.x.array().log();
  cache_.resize(static_cast<std::size_t>(layout_.m * layout_.p));
}

double MSCEPosterior::operator()(const VectorXd& theta) const {
  if (!bounds_.contains(theta)) return kNegInf;
  return evaluate_unchecked(MSCEParams::unpack(theta, layout_.m, layout_.n_nod));
}

double MSCEPosterior::evaluate(const MSCEParams& params) const {
  const VectorXd theta = params.pack();
  return (*this)(theta);
}

double MSCEPosterior::evaluate_unchecked(const MSCEParams& params) const {
  CorrelationFactor factor;
  try {
    const MatrixXd corr = conditional_corr(unconditional_corr(params, layout_));
    if (!try_factorize_correlation(corr, factor)) return kNegInf;
  } catch (const ComputationError&) {
    return kNegInf;
  }

  const std::vector<ColumnParams> cols = column_params(params, layout_);
  const auto d = static_cast<Eigen::Index>(cols.size());
  const Eigen::Index n = data_.x.size();
  ++clock_;

  // Resolve each column to a cache slot, computing the missing ones.
  std::vector<ColumnEntry*> slot(cols.size());
  std::vector<std::size_t> todo;
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const std::array<double, 5> key{cols[c].alpha, cols[c].beta, cols[c].mu, cols[c].sigma, cols[c].delta};
    auto& pair = cache_[c];
    ColumnEntry* hit = nullptr;
    for (auto& e : pair)
      if (e.valid && e.key == key) hit = &e;
    if (!hit) {
      hit = pair[0].stamp <= pair[1].stamp ? &pair[0] : &pair[1];
      hit->key = key;
      hit->valid = false;
      todo.push_back(c);
    }
    hit->stamp = clock_;
    slot[c] = hit;
  }
  parallel_for(
      todo.size(),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
          const std::size_t c = todo[t];
          ColumnEntry& entry = *slot[c];
          const ColumnParams& cp = cols[c];
          const DeltaLaplaceMargin margin(cp.mu, cp.sigma, cp.delta);
          entry.w.resize(n);
          double term = 0.0;
          for (Eigen::Index i = 0; i < n; ++i) {
            const double scale = std::exp(cp.beta * log_x_(i));
            const double z = (data_.y(i, static_cast<Eigen::Index>(c)) - cp.alpha * data_.x(i)) / scale;
            const double w = gaussian_score(z, margin);
            entry.w(i) = w;
            term += dl_logpdf(z, margin) - special::normal_logpdf(w) - cp.beta * log_x_(i);
          }
          entry.term = term;
          entry.valid = true;
        }
      },
      1);

  double total = 0.0;
  MatrixXd w(d, n);
  for (Eigen::Index c = 0; c < d; ++c) {
    total += slot[static_cast<std::size_t>(c)]->term;
    w.row(c) = slot[static_cast<std::size_t>(c)]->w.transpose();
  }
  if (!std::isfinite(total)) return kNegInf;
  factor.lower.triangularView<Eigen::Lower>().solveInPlace(w);
  total += -0.5 * w.squaredNorm() - static_cast<double>(n) * (0.5 * factor.log_det + static_cast<double>(d) * special::kLogSqrt2Pi);
  return std::isfinite(total) ? total : kNegInf;
}

double msce_logposterior(const MSCEParams& params, const ModelLayout& layout, const LaplaceDataset& data) {
  const MSCEPosterior post(layout, data);
  return post.evaluate(params);
}

}  // namespace msce::model
