#include <doctest.h>

#include <Eigen/LU>
#include <cmath>
#include <limits>
#include <random>

#include "msce/error.hpp"
#include "msce/mcmc.hpp"

using namespace msce;
using namespace msce::mcmc;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double canonical(Rng& rng) { return std::generate_canonical<double, 53>(rng); }

Bounds box(Eigen::Index d, double lo, double hi) { return {VectorXd::Constant(d, lo), VectorXd::Constant(d, hi)}; }

}  // namespace

TEST_CASE("config validation") {
  MCMCConfig c;
  CHECK_NOTHROW(c.validate());
  c.n1 = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.n2 = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.epsilon = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.epsilon = 1.0;
  CHECK_NOTHROW(c.validate());
  c = {};
  c.burn_in = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(MCMCConfig{}.n1 == 250);
  CHECK(MCMCConfig{}.n2 == 19750);
  CHECK(MCMCConfig{}.n_random_search == 2000);
  CHECK(MCMCConfig{}.epsilon == 0.05);
}

TEST_CASE("random search") {
  MCMCConfig c;
  SUBCASE("narrow box") {
    Rng rng(1);
    const Bounds b{VectorXd::Constant(1, 0.499), VectorXd::Constant(1, 0.501)};
    const VectorXd x = random_search_init([](const VectorXd& v) { return -std::pow(v(0) - 0.5, 2); }, b, c, rng);
    CHECK(x(0) >= 0.499);
    CHECK(x(0) <= 0.501);
  }
  SUBCASE("quadratic on the unit square") {
    const Eigen::Vector2d target(0.3, 0.7);
    auto lp = [&](const VectorXd& v) { return -(v - target).squaredNorm(); };
    int close = 0;
    const int seeds = 200;
    for (int s = 0; s < seeds; ++s) {
      Rng rng(static_cast<std::uint64_t>(s));
      close += (random_search_init(lp, box(2, 0.0, 1.0), c, rng) - target).norm() < 0.05;
    }
    CHECK(close >= 0.95 * seeds);
  }
  SUBCASE("no finite draw") {
    Rng rng(2);
    try {
      random_search_init([](const VectorXd&) { return -kInf; }, box(3, 0.0, 1.0), c, rng);
      FAIL("expected INIT_FAILED");
    } catch (const ComputationError& e) {
      CHECK(std::string(e.code()) == "INIT_FAILED");
    }
  }
  SUBCASE("deterministic") {
    auto lp = [](const VectorXd& v) { return -v.squaredNorm(); };
    Rng a(9), b(9);
    CHECK(random_search_init(lp, box(4, -1.0, 1.0), c, a) == random_search_init(lp, box(4, -1.0, 1.0), c, b));
  }
}

TEST_CASE("Gibbs warmup") {
  MCMCConfig c;
  SUBCASE("standard normal target") {
    Rng rng(3);
    const auto lp = [](const VectorXd& v) { return -0.5 * v.squaredNorm(); };
    const WarmupResult w = gibbs_warmup(lp, VectorXd::Zero(1), box(1, -20.0, 20.0), c, rng);
    // Acceptance of a fresh run at the adapted scale.
    int acc = 0;
    const int n = 5000;
    double x = w.state(0);
    std::normal_distribution<double> nz;
    for (int i = 0; i < n; ++i) {
      const double y = x + w.step(0) * nz(rng);
      if (std::log(canonical(rng)) < -0.5 * (y * y - x * x)) {
        x = y;
        ++acc;
      }
    }
    const double rate = static_cast<double>(acc) / n;
    CHECK(rate >= 0.2);
    CHECK(rate <= 0.7);
    CHECK(w.acceptance(0) >= 0.2);
    CHECK(w.acceptance(0) <= 0.7);
  }
  SUBCASE("zero-width coordinate never moves") {
    Rng rng(4);
    Bounds b = box(3, -5.0, 5.0);
    b.lower(1) = b.upper(1) = 0.25;
    VectorXd start = VectorXd::Zero(3);
    start(1) = 0.25;
    const WarmupResult w = gibbs_warmup([](const VectorXd& v) { return -0.5 * v.squaredNorm(); }, start, b, c, rng);
    CHECK(w.states.size() == static_cast<std::size_t>(c.n1));
    for (const auto& s : w.states) CHECK(s(1) == 0.25);
  }
  SUBCASE("states stay finite under a truncated target") {
    Rng rng(5);
    auto lp = [](const VectorXd& v) { return v(0) < 0.0 ? -kInf : -v(0); };
    const WarmupResult w = gibbs_warmup(lp, VectorXd::Constant(1, 1.0), box(1, -10.0, 10.0), c, rng);
    for (const auto& s : w.states) CHECK(std::isfinite(lp(s)));
  }
}

TEST_CASE("adaptive chain on a correlated Gaussian") {
  Eigen::Matrix2d cov;
  cov << 1.0, 0.8, 0.8, 1.0;
  const Eigen::Matrix2d prec = cov.inverse();
  const Eigen::Vector2d mean(1.0, -2.0);
  auto lp = [&](const VectorXd& v) {
    const Eigen::Vector2d r = v - mean;
    return -0.5 * r.dot(prec * r);
  };
  MCMCConfig c;
  c.n2 = 20000;
  c.seed = 17;
  const PosteriorChain chain = run_chain(lp, box(2, -15.0, 15.0), c);
  const std::vector<VectorXd> kept = retained(chain);
  Eigen::Vector2d m = Eigen::Vector2d::Zero();
  for (const auto& v : kept) m += v;
  m /= static_cast<double>(kept.size());
  Eigen::Matrix2d s = Eigen::Matrix2d::Zero();
  for (const auto& v : kept) s += (v - m) * (v - m).transpose();
  s /= static_cast<double>(kept.size() - 1);
  CHECK(std::abs(m(0) - mean(0)) < 0.05);
  CHECK(std::abs(m(1) - mean(1)) < 0.05);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(std::abs(s(i, j) - cov(i, j)) < 0.1 * std::abs(cov(i, j)));
  CHECK(chain.size() == 20000);
  CHECK(chain.burn_in == 5000);
  for (double v : chain.logpost) CHECK(std::isfinite(v));
}

TEST_CASE("uniform box target keeps samples inside") {
  const Bounds b = box(3, 0.0, 1.0);
  auto lp = [&](const VectorXd& v) {
    return ((v.array() < b.lower.array()).any() || (v.array() > b.upper.array()).any()) ? -kInf : 0.0;
  };
  MCMCConfig c;
  c.n2 = 5000;
  c.seed = 8;
  const PosteriorChain chain = run_chain(lp, b, c);
  for (const auto& s : chain.samples) {
    CHECK((s.array() >= 0.0).all());
    CHECK((s.array() <= 1.0).all());
  }
}

TEST_CASE("epsilon = 1 is fixed-kernel Metropolis") {
  auto lp = [](const VectorXd& v) { return -0.5 * v.squaredNorm() - 0.1 * v.array().pow(4).sum(); };
  WarmupResult w;
  w.state = VectorXd::Constant(3, 0.5);
  w.logpost = lp(w.state);
  w.states = {w.state};
  MCMCConfig c;
  c.epsilon = 1.0;
  c.n2 = 3000;
  Rng rng(11);
  const PosteriorChain chain = adaptive_chain(lp, w, c, rng);

  Rng ref(11);
  std::normal_distribution<double> nz;
  VectorXd x = w.state, noise(3);
  double cur = w.logpost;
  const double scale = 0.1 / std::sqrt(3.0);
  for (int it = 0; it < c.n2; ++it) {
    canonical(ref);  // mixture component, always the fixed one
    for (int k = 0; k < 3; ++k) noise(k) = nz(ref);
    const VectorXd y = x + scale * noise;
    const double u = canonical(ref);
    if (std::log(u) < lp(y) - cur) {
      x = y;
      cur = lp(y);
    }
    REQUIRE(chain.samples[static_cast<std::size_t>(it)] == x);
  }
  CHECK(chain.covariance_fallbacks == 0);
}

TEST_CASE("chains are reproducible") {
  auto lp = [](const VectorXd& v) { return -0.5 * v.squaredNorm(); };
  MCMCConfig c;
  c.n1 = 20;
  c.n2 = 500;
  c.n_random_search = 50;
  c.seed = 77;
  const PosteriorChain a = run_chain(lp, box(4, -3.0, 3.0), c);
  const PosteriorChain b = run_chain(lp, box(4, -3.0, 3.0), c);
  CHECK(a.samples == b.samples);
  CHECK(a.logpost == b.logpost);
  c.seed = 78;
  CHECK(run_chain(lp, box(4, -3.0, 3.0), c).samples != a.samples);

  const auto many = run_chains([&] { return LogPosterior(lp); }, box(4, -3.0, 3.0), c, 3);
  const auto again = run_chains([&] { return LogPosterior(lp); }, box(4, -3.0, 3.0), c, 3);
  REQUIRE(many.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(many[i].samples == again[i].samples);
  CHECK(many[0].samples != many[1].samples);
}

TEST_CASE("summary") {
  PosteriorChain chain;
  for (int i = 0; i < 100; ++i) {
    chain.samples.push_back(VectorXd::Constant(1, static_cast<double>(i)));
    chain.logpost.push_back(0.0);
  }
  chain.burn_in = 25;
  const ChainSummary s = summarize(chain);
  CHECK(s.used == 75);
  CHECK(s.mean(0) == doctest::Approx(62.0));
  CHECK(s.median(0) == doctest::Approx(62.0));
  CHECK(s.lo(0) == doctest::Approx(25.0 + 0.025 * 74));
  CHECK(s.hi(0) == doctest::Approx(25.0 + 0.975 * 74));
}
