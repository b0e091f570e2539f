#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "msce/distributions.hpp"
#include "msce/geo.hpp"
#include "msce/types.hpp"

namespace msce::model {

// Ordering of the remote (location, quantity) pairs: all p locations of
// quantity 1, then quantity 2, and so on. j and k are 1-based.
struct RemoteIndex {
  int p = 0;
  int m = 0;

  int size() const { return p * m; }
  // A(j, k) in 1..mp
  int position(int j, int k) const;
  // Extended set with the conditioning pair (0, 1) at position 0.
  int extended_position(int j, int k) const;
  // Inverse of extended_position: (location 0..p, quantity 1..m).
  std::pair<int, int> pair_at(int extended) const;
};

class PiecewiseLinearFn {
 public:
  PiecewiseLinearFn() = default;
  PiecewiseLinearFn(std::vector<double> node_distances, std::vector<double> node_values);

  // Linear between bracketing nodes, constant beyond the end nodes.
  double operator()(double d) const;

  const std::vector<double>& node_distances() const { return nodes_; }
  const std::vector<double>& node_values() const { return values_; }

 private:
  std::vector<double> nodes_;
  std::vector<double> values_;
};

// Geometry and fixed constants of a fitted model.
struct ModelLayout {
  int m = 1;
  int p = 1;
  int n_nod = 5;
  std::vector<double> node_km;  // n_nod equally spaced from dist(r_0,r_1) to dist(r_0,r_p)
  std::vector<double> remote_km;  // dist(r_0, r_j), j = 1..p
  MatrixXd pairwise_km;         // (p+1) x (p+1), location 0 = r_0
  double rho_unit_km = 100.0;
  double kappa_unit = 5.0;
  double u = std::log(2.0);

  RemoteIndex index() const { return {p, m}; }
  // Distance of the location behind extended position a.
  double location_km(int a) const;
};

// distances: dist(r_0, r_j) for j = 0..p with the first entry 0.
ModelLayout make_layout(const std::vector<double>& distances, int m, int n_nod = 5);
ModelLayout make_layout(const geo::Transect& transect, int m, int n_nod = 5);

// Upper-triangular row-major pair index over quantities (0-based k < k2,
// or k <= k2 when the diagonal is included).
std::size_t pair_offset(int k, int k2, int m, bool with_diagonal);

struct MSCEParams {
  int m = 1;
  int n_nod = 5;
  // Node values indexed [k][l], k and l 0-based.
  std::vector<std::vector<double>> alpha, beta, mu, sigma, delta;
  std::vector<double> lambda;  // m(m-1)/2, pairs k < k'
  std::vector<double> rho;     // m(m+1)/2 scaled, pairs k <= k'
  std::vector<double> kappa;   // m(m+1)/2 scaled, pairs k <= k'

  static MSCEParams filled(int m, int n_nod);
  static std::size_t packed_size(int m, int n_nod);

  // Order: alpha, beta, mu, sigma, delta (each all k then all l), lambda, rho, kappa.
  VectorXd pack() const;
  static MSCEParams unpack(const VectorXd& theta, int m, int n_nod);

  double lambda_of(int k, int k2) const;  // 1 on the diagonal
  double rho_of(int k, int k2) const;
  double kappa_of(int k, int k2) const;
};

std::vector<std::string> parameter_names(int m, int n_nod);

// Uniform prior support. Lower bounds of alpha, sigma, lambda, rho and kappa
// are open at zero.
struct ParamBounds {
  VectorXd lower;
  VectorXd upper;
  std::vector<bool> lower_open;

  bool contains(const VectorXd& theta) const;
};
ParamBounds parameter_bounds(int m, int n_nod);

struct NodeProfiles {
  // Piecewise-linear profiles per quantity.
  std::vector<PiecewiseLinearFn> alpha, beta, mu, sigma, delta;
};
NodeProfiles profiles(const MSCEParams& params, const ModelLayout& layout);

// (mp+1) x (mp+1) correlation of the unconditioned Gaussian field, index 0
// being the conditioning pair.
MatrixXd unconditional_corr(const MSCEParams& params, const ModelLayout& layout);
// mp x mp correlation given the value at index 0. Throws ComputationError
// with code DEGENERATE_CONDITIONING when some |corr(a, 0)| = 1.
MatrixXd conditional_corr(const MatrixXd& sigma_star);

struct LaplaceDataset {
  VectorXd x;       // conditioning values
  RowMatrixXd y;    // n x mp, columns ordered by A(j, k)
  std::vector<double> remote_km;
  std::vector<std::string> names;
  double u = std::log(2.0);

  std::size_t size() const { return static_cast<std::size_t>(x.size()); }
  // Throws std::invalid_argument on shape mismatch or x_i <= u.
  void validate(const ModelLayout& layout) const;
};

// Per-column margin parameters at the column's location.
struct ColumnParams {
  double alpha, beta, mu, sigma, delta;
};
std::vector<ColumnParams> column_params(const MSCEParams& params, const ModelLayout& layout);

// Log-posterior under uniform priors. Sequential evaluation reuses Gaussian
// scores of columns whose margin parameters did not change, so one instance
// must not be shared between threads.
class MSCEPosterior {
 public:
  MSCEPosterior(ModelLayout layout, LaplaceDataset data);

  double operator()(const VectorXd& theta) const;
  double evaluate(const MSCEParams& params) const;

  const ModelLayout& layout() const { return layout_; }
  const LaplaceDataset& data() const { return data_; }
  const ParamBounds& bounds() const { return bounds_; }
  std::size_t dim() const { return static_cast<std::size_t>(bounds_.lower.size()); }

 private:
  struct ColumnEntry {
    std::array<double, 5> key{};
    VectorXd w;
    double term = 0.0;
    std::uint64_t stamp = 0;
    bool valid = false;
  };

  double evaluate_unchecked(const MSCEParams& params) const;

  ModelLayout layout_;
  LaplaceDataset data_;
  ParamBounds bounds_;
  VectorXd log_x_;
  mutable std::vector<std::array<ColumnEntry, 2>> cache_;
  mutable std::uint64_t clock_ = 0;
};

double msce_logposterior(const MSCEParams& params, const ModelLayout& layout, const LaplaceDataset& data);

}  // namespace msce::model
