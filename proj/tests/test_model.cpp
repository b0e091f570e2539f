#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "msce/distributions.hpp"
#include "msce/error.hpp"
#include "msce/model.hpp"
#include "direct_model.hpp"
#include "oracles.hpp"

using namespace msce;
using namespace msce::model;

namespace {

// Uniform draw inside the prior box.
MSCEParams random_params(int m, int n_nod, std::mt19937_64& rng) {
  const ParamBounds b = parameter_bounds(m, n_nod);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VectorXd t(b.lower.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = b.lower(i) + (b.upper(i) - b.lower(i)) * (0.001 + 0.998 * u(rng));
  return MSCEParams::unpack(t, m, n_nod);
}

// Plausible parameters: moderate dependence, near-Laplace margins.
MSCEParams tame_params(int m, int n_nod, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MSCEParams p = MSCEParams::filled(m, n_nod);
  for (int k = 0; k < m; ++k)
    for (int l = 0; l < n_nod; ++l) {
      p.alpha[k][l] = 0.2 + 0.6 * u(rng);
      p.beta[k][l] = -0.2 + 0.5 * u(rng);
      p.mu[k][l] = -0.3 + 0.6 * u(rng);
      p.sigma[k][l] = 0.6 + 0.8 * u(rng);
      p.delta[k][l] = 0.8 + 1.2 * u(rng);
    }
  for (auto& v : p.lambda) v = 0.2 + 0.6 * u(rng);
  for (auto& v : p.rho) v = 0.3 + 0.6 * u(rng);
  for (auto& v : p.kappa) v = 0.1 + 0.3 * u(rng);
  return p;
}

}  // namespace

TEST_CASE("remote index") {
  const RemoteIndex r13{13, 3};
  CHECK(r13.position(1, 1) == 1);
  CHECK(r13.position(13, 3) == 39);
  CHECK(r13.extended_position(0, 1) == 0);
  CHECK(r13.extended_position(1, 1) == 1);
  CHECK(r13.extended_position(13, 3) == 39);
  CHECK_THROWS_AS(r13.position(0, 1), std::out_of_range);
  CHECK_THROWS_AS(r13.position(14, 1), std::out_of_range);
  CHECK_THROWS_AS(r13.position(1, 4), std::out_of_range);
  for (int a = 0; a <= 39; ++a) {
    const auto [j, k] = r13.pair_at(a);
    CHECK(r13.extended_position(j, k) == a);
  }
}

TEST_CASE("piecewise linear profiles") {
  const PiecewiseLinearFn f({100.0, 200.0, 400.0}, {0.2, 0.6, -1.0});
  CHECK(f(100.0) == 0.2);
  CHECK(f(200.0) == 0.6);
  CHECK(f(400.0) == -1.0);
  CHECK(f(150.0) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(f(300.0) == doctest::Approx(-0.2).epsilon(1e-15));
  CHECK(f(500.0) == -1.0);
  CHECK(f(0.0) == 0.2);
  CHECK_THROWS_AS(PiecewiseLinearFn({1.0, 1.0}, {0.0, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(PiecewiseLinearFn({1.0, 2.0}, {0.0}), std::invalid_argument);
}

TEST_CASE("parameter count and packing") {
  for (int m : {1, 2, 3, 4})
    for (int n_nod : {1, 3, 5}) {
      const auto count = static_cast<std::size_t>(m * (5 * n_nod) + m * (3 * m + 1) / 2);
      CHECK(parameter_names(m, n_nod).size() == count);
      CHECK(static_cast<std::size_t>(parameter_bounds(m, n_nod).lower.size()) == count);
      std::mt19937_64 rng(static_cast<std::uint64_t>(m * 10 + n_nod));
      const MSCEParams p = random_params(m, n_nod, rng);
      const VectorXd t = p.pack();
      CHECK(static_cast<std::size_t>(t.size()) == count);
      CHECK(MSCEParams::unpack(t, m, n_nod).pack() == t);
    }
  CHECK(parameter_names(3, 5).size() == 90);
}

TEST_CASE("unconditional correlation examples") {
  const ModelLayout layout = make_layout({0.0, 100.0, 150.0, 300.0}, 3, 3);
  MSCEParams p = MSCEParams::filled(3, 3);
  p.lambda = {0.5, 0.7, 0.6};  // pairs 12, 13, 23
  p.rho = {1.0, 0.5, 0.5, 0.8, 0.5, 0.5};
  p.kappa = {0.2, 0.2, 0.2, 0.3, 0.2, 0.2};
  const MatrixXd s = unconditional_corr(p, layout);
  const RemoteIndex idx = layout.index();
  CHECK(s(idx.extended_position(2, 1), idx.extended_position(2, 1)) == 1.0);
  // Locations 0 and 1 are 100 km apart, rho_11 = 100 km.
  CHECK(s(0, idx.extended_position(1, 1)) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  // Same location, quantities 1 and 3.
  CHECK(s(idx.extended_position(2, 1), idx.extended_position(2, 3)) == doctest::Approx(0.49).epsilon(1e-15));
  // Quantities 1 and 2 at 50 km with rho 50, kappa 1.
  CHECK(s(idx.extended_position(1, 1), idx.extended_position(2, 2)) == doctest::Approx(0.5 * std::exp(-1.0)).epsilon(1e-15));
  CHECK(s(idx.extended_position(1, 2), idx.extended_position(3, 2)) ==
        doctest::Approx(std::exp(-std::pow(200.0 / 80.0, 1.5))).epsilon(1e-14));
}

TEST_CASE("conditional correlation examples") {
  MatrixXd s = MatrixXd::Identity(3, 3);
  s(1, 2) = s(2, 1) = 0.8;
  MatrixXd c = conditional_corr(s);
  CHECK(c(0, 1) == 0.8);
  CHECK(c(0, 0) == 1.0);
  s(0, 1) = s(1, 0) = s(0, 2) = s(2, 0) = 0.5;
  c = conditional_corr(s);
  CHECK(c(0, 1) == doctest::Approx(0.55 / 0.75).epsilon(1e-15));
  CHECK(c(1, 1) == 1.0);
  s(0, 1) = s(1, 0) = 1.0;
  try {
    conditional_corr(s);
    FAIL("expected degenerate conditioning");
  } catch (const ComputationError& e) {
    CHECK(std::string(e.code()) == "DEGENERATE_CONDITIONING");
  }
}

TEST_CASE("correlations are symmetric with unit diagonal on random draws") {
  const ModelLayout layout = make_layout({0.0, 80.0, 170.0, 260.0, 400.0}, 3, 5);
  std::mt19937_64 rng(21);
  int non_pd = 0;
  const int draws = 1000;
  for (int i = 0; i < draws; ++i) {
    const MSCEParams p = random_params(3, 5, rng);
    const MatrixXd s = unconditional_corr(p, layout);
    CHECK(s.diagonal().isOnes(0.0));
    CHECK(s == s.transpose());
    const MatrixXd c = conditional_corr(s);
    CHECK(c.diagonal().isOnes(0.0));
    CHECK(c == c.transpose());
    if (Eigen::LLT<MatrixXd>(c).info() != Eigen::Success) ++non_pd;
  }
  MESSAGE("non-PD conditional correlations: " << non_pd << "/" << draws);
}

TEST_CASE("log-posterior matches a direct evaluation") {
  const std::vector<double> dist{0.0, 120.0, 260.0};
  const ModelLayout layout = make_layout(dist, 2, 2);
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    const MSCEParams p = tame_params(2, 2, rng);
    LaplaceDataset data;
    data.u = std::log(2.0);
    data.remote_km = layout.remote_km;
    data.x.resize(50);
    data.y.resize(50, 4);
    std::exponential_distribution<double> ex(1.0);
    std::normal_distribution<double> nz(0.0, 1.0);
    std::vector<double> xs;
    std::vector<std::vector<double>> ys;
    for (int i = 0; i < 50; ++i) {
      data.x(i) = data.u + ex(rng);
      xs.push_back(data.x(i));
      ys.emplace_back();
      for (int a = 0; a < 4; ++a) {
        data.y(i, a) = 0.5 * data.x(i) + nz(rng);
        ys.back().push_back(data.y(i, a));
      }
    }
    const double got = msce_logposterior(p, layout, data);
    const double want = oracle::direct_logposterior(p, dist, xs, ys, 2);
    CHECK(got == doctest::Approx(want).epsilon(1e-8 / std::abs(want)).scale(1.0));
    CHECK(std::abs(got - want) < 1e-8);
    MSCEPosterior post(layout, data);
    CHECK(post(p.pack()) == got);
    // Cached columns must not change a later evaluation.
    MSCEParams q = p;
    q.sigma[1][0] += 0.1;
    const double fresh = msce_logposterior(q, layout, data);
    CHECK(post(q.pack()) == fresh);
    CHECK(post(p.pack()) == got);
  }
}

TEST_CASE("log-posterior reductions") {
  SUBCASE("single exact event") {
    const ModelLayout layout = make_layout({0.0, 50.0}, 1, 1);
    MSCEParams p = MSCEParams::filled(1, 1);
    p.alpha = {{1.0}};
    p.beta = {{0.0}};
    p.mu = {{0.0}};
    p.sigma = {{1.0}};
    p.delta = {{2.0}};
    LaplaceDataset data;
    data.x = VectorXd::Constant(1, 2.0);
    data.y = RowMatrixXd::Constant(1, 1, 2.0);
    data.remote_km = {50.0};
    CHECK(msce_logposterior(p, layout, data) == doctest::Approx(-0.5 * std::log(2 * M_PI)).epsilon(1e-14));
  }
  SUBCASE("beta zero removes the Jacobian") {
    const ModelLayout layout = make_layout({0.0, 40.0, 90.0}, 1, 2);
    std::mt19937_64 rng(3);
    MSCEParams p = tame_params(1, 2, rng);
    p.beta = {{0.0, 0.0}};
    LaplaceDataset data;
    data.x.resize(20);
    data.y.resize(20, 2);
    data.remote_km = layout.remote_km;
    std::normal_distribution<double> nz;
    double expected = 0.0;
    std::vector<DeltaLaplaceMargin> margins;
    for (int j = 0; j < 2; ++j)
      margins.emplace_back(p.mu[0][static_cast<std::size_t>(j)], p.sigma[0][static_cast<std::size_t>(j)],
                           p.delta[0][static_cast<std::size_t>(j)]);
    const ResidualModel rm(margins, conditional_corr(unconditional_corr(p, layout)));
    for (int i = 0; i < 20; ++i) {
      data.x(i) = 1.0 + 0.1 * i;
      VectorXd z(2);
      for (int a = 0; a < 2; ++a) {
        data.y(i, a) = p.alpha[0][static_cast<std::size_t>(a)] * data.x(i) + nz(rng);
        z(a) = data.y(i, a) - p.alpha[0][static_cast<std::size_t>(a)] * data.x(i);
      }
      expected += residual_logdensity(z, rm);
    }
    CHECK(msce_logposterior(p, layout, data) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("outside the prior box the log-posterior is -inf") {
  const ModelLayout layout = make_layout({0.0, 40.0, 90.0}, 1, 2);
  LaplaceDataset data;
  data.x = VectorXd::Constant(3, 1.5);
  data.y = RowMatrixXd::Constant(3, 2, 0.5);
  data.remote_km = layout.remote_km;
  MSCEPosterior post(layout, data);
  const ParamBounds b = parameter_bounds(1, 2);
  const VectorXd mid = 0.5 * (b.lower + b.upper);
  CHECK(std::isfinite(post(mid)));
  for (Eigen::Index i = 0; i < mid.size(); ++i) {
    VectorXd t = mid;
    t(i) = b.upper(i) + 1e-9;
    CHECK(post(t) == -std::numeric_limits<double>::infinity());
    t(i) = b.lower(i) - 1e-9;
    CHECK(post(t) == -std::numeric_limits<double>::infinity());
    if (b.lower_open[static_cast<std::size_t>(i)]) {
      t(i) = b.lower(i);
      CHECK(post(t) == -std::numeric_limits<double>::infinity());
    }
  }
}

TEST_CASE("log-posterior is invariant to event order") {
  const ModelLayout layout = make_layout({0.0, 60.0, 130.0, 210.0}, 2, 3);
  std::mt19937_64 rng(41);
  const MSCEParams p = tame_params(2, 3, rng);
  LaplaceDataset data;
  data.x.resize(40);
  data.y.resize(40, 6);
  data.remote_km = layout.remote_km;
  std::normal_distribution<double> nz;
  for (int i = 0; i < 40; ++i) {
    data.x(i) = 0.8 + 0.05 * i;
    for (int a = 0; a < 6; ++a) data.y(i, a) = 0.4 * data.x(i) + nz(rng);
  }
  const double base = msce_logposterior(p, layout, data);
  std::vector<int> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  LaplaceDataset shuffled = data;
  for (int i = 0; i < 40; ++i) {
    shuffled.x(i) = data.x(perm[static_cast<std::size_t>(i)]);
    shuffled.y.row(i) = data.y.row(perm[static_cast<std::size_t>(i)]);
  }
  CHECK(msce_logposterior(p, layout, shuffled) == doctest::Approx(base).epsilon(1e-13));
}

TEST_CASE("far from the conditioning site the conditional margin is standard Laplace") {
  const ModelLayout layout = make_layout({0.0, 200.0, 900.0}, 1, 2);
  MSCEParams p = MSCEParams::filled(1, 2);
  p.alpha = {{0.5, 0.0}};
  p.beta = {{0.3, 0.0}};
  p.mu = {{0.0, 0.0}};
  p.sigma = {{1.0, std::sqrt(2.0)}};
  p.delta = {{1.5, 1.0}};
  const auto cols = column_params(p, layout);
  const ColumnParams& far = cols[1];
  const DeltaLaplaceMargin dl(far.mu, far.sigma, far.delta);
  // X | x = 0 * x + x^0 Z = Z
  for (double y = -8.0; y <= 8.0; y += 0.25) {
    CHECK(dl_cdf(y, dl) == doctest::Approx(std_laplace_cdf(y)).epsilon(1e-12));
    CHECK(dl_logpdf(y, dl) == doctest::Approx(std_laplace_logpdf(y)).epsilon(1e-12));
  }
}

TEST_CASE("layout") {
  const ModelLayout l = make_layout({0.0, 100.0, 200.0, 500.0}, 2, 3);
  CHECK(l.p == 3);
  CHECK(l.node_km == std::vector<double>{100.0, 300.0, 500.0});
  CHECK(l.pairwise_km(1, 3) == 400.0);
  CHECK_THROWS_AS(make_layout({0.0, 100.0, 100.0}, 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(make_layout({1.0, 100.0}, 1, 1), std::invalid_argument);
}
