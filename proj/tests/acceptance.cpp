// One PASS/FAIL line per acceptance criterion. `--only N` runs a single one.

#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <boost/math/distributions/normal.hpp>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "direct_model.hpp"
#include "msce/diagnostics.hpp"
#include "msce/distributions.hpp"
#include "msce/geo.hpp"
#include "msce/log.hpp"
#include "msce/marginal.hpp"
#include "msce/mcmc.hpp"
#include "msce/model.hpp"
#include "msce/pipeline.hpp"
#include "msce/synth.hpp"
#include "oracles.hpp"

using namespace msce;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

// ---- 1 -------------------------------------------------------------------

constexpr double kIdentityTol = 1e-5;
constexpr double kReductionTol = 1e-12;

Outcome distribution_identities() {
  double worst_mass = 0.0, worst_var = 0.0;
  for (double delta : {0.5, 1.0, 2.0, 4.0}) {
    const DeltaLaplaceMargin m(0.3, 1.4, delta);
    auto pdf = [&](double z) { return std::exp(dl_logpdf(z, m)); };
    // Split at the mode; tails are negligible beyond 60 scale units for delta >= 0.5.
    const double lo = 0.3 - 60.0 * 1.4 * (delta < 1 ? 40.0 : 1.0), hi = 2 * 0.3 - lo;
    const double mass = oracle::integrate(pdf, lo, 0.3) + oracle::integrate(pdf, 0.3, hi);
    auto second = [&](double z) { return (z - 0.3) * (z - 0.3) * pdf(z); };
    const double var = oracle::integrate(second, lo, 0.3) + oracle::integrate(second, 0.3, hi);
    worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
    worst_var = std::max(worst_var, std::abs(var - 1.4 * 1.4));
  }
  double worst_red = 0.0;
  const DeltaLaplaceMargin gauss(0.0, 1.0, 2.0);
  const boost::math::normal_distribution<double> nd;
  for (double z = -8.0; z <= 8.0; z += 0.01) {
    worst_red = std::max(worst_red, std::abs(dl_logpdf(z, gauss) - (-0.5 * z * z - 0.5 * std::log(2 * M_PI))));
    worst_red = std::max(worst_red, std::abs(dl_cdf(z, gauss) - boost::math::cdf(nd, z)));
  }
  auto lap = [](double z) { return z * z * std::exp(std_laplace_logpdf(z)); };
  const double lap_var = oracle::integrate(lap, -80.0, 0.0) + oracle::integrate(lap, 0.0, 80.0);
  const bool pass = worst_mass < kIdentityTol && worst_var < kIdentityTol * 1.96 && worst_red < kReductionTol &&
                    std::abs(lap_var - 2.0) < kIdentityTol;
  return {pass, "max |mass-1| " + fmt(worst_mass) + ", max |var-sigma^2| " + fmt(worst_var) +
                    ", normal reduction " + fmt(worst_red) + ", Laplace variance " + fmt(lap_var)};
}

// ---- 2 -------------------------------------------------------------------

constexpr double kCopulaTol = 1e-9;

Outcome copula_reduction() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nz;
  double worst = 0.0;
  for (int c = 0; c < 200; ++c) {
    const int d = 1 + c % 6;
    const Eigen::MatrixXd corr = oracle::random_corr(d, rng);
    std::vector<DeltaLaplaceMargin> margins;
    Eigen::VectorXd z(d), w(d);
    double log_scale = 0.0;
    for (int a = 0; a < d; ++a) {
      const double mu = -1.0 + 2.0 * u(rng), sigma = 0.3 + 2.0 * u(rng);
      margins.emplace_back(mu, sigma, 2.0);
      z(a) = mu + sigma * 1.5 * nz(rng);
      w(a) = (z(a) - mu) / sigma;
      log_scale += std::log(sigma);
    }
    const double got = residual_logdensity(z, ResidualModel(margins, corr));
    const double want = oracle::mvn_logpdf(w, corr) - log_scale;
    worst = std::max(worst, std::abs(got - want));
  }
  return {worst < kCopulaTol, "200 cases, max abs difference " + fmt(worst)};
}

// ---- 3 -------------------------------------------------------------------

Outcome correlation_formulas() {
  bool exact = true;
  {
    const model::ModelLayout layout = model::make_layout({0.0, 100.0, 150.0}, 3, 2);
    model::MSCEParams p = model::MSCEParams::filled(3, 2);
    p.lambda = {0.5, 0.7, 0.6};
    p.rho = {1.0, 0.5, 0.5, 0.8, 0.5, 0.5};
    const Eigen::MatrixXd s = model::unconditional_corr(p, layout);
    const model::RemoteIndex idx = layout.index();
    exact &= s(idx.extended_position(1, 1), idx.extended_position(1, 1)) == 1.0;
    exact &= std::abs(s(0, idx.extended_position(1, 1)) - std::exp(-1.0)) < 1e-15;
    exact &= std::abs(s(idx.extended_position(2, 1), idx.extended_position(2, 3)) - 0.49) < 1e-15;
    Eigen::MatrixXd star = Eigen::MatrixXd::Identity(3, 3);
    star(1, 2) = star(2, 1) = 0.8;
    exact &= model::conditional_corr(star)(0, 1) == 0.8;
    star(0, 1) = star(1, 0) = star(0, 2) = star(2, 0) = 0.5;
    exact &= std::abs(model::conditional_corr(star)(0, 1) - 0.55 / 0.75) < 1e-15;
  }
  const model::ModelLayout layout = model::make_layout({0.0, 80.0, 170.0, 260.0, 400.0, 520.0, 640.0}, 3, 5);
  const model::ParamBounds b = model::parameter_bounds(3, 5);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int structural_failures = 0, non_pd = 0;
  const int draws = 1000;
  for (int i = 0; i < draws; ++i) {
    Eigen::VectorXd t(b.lower.size());
    for (Eigen::Index c = 0; c < t.size(); ++c) t(c) = b.lower(c) + (b.upper(c) - b.lower(c)) * (0.001 + 0.998 * u(rng));
    const model::MSCEParams p = model::MSCEParams::unpack(t, 3, 5);
    const Eigen::MatrixXd s = model::unconditional_corr(p, layout);
    const Eigen::MatrixXd c = model::conditional_corr(s);
    if (!(s == s.transpose()) || !s.diagonal().isOnes(0.0) || !(c == c.transpose()) || !c.diagonal().isOnes(0.0))
      ++structural_failures;
    if (Eigen::LLT<Eigen::MatrixXd>(c).info() != Eigen::Success) ++non_pd;
  }
  return {exact && structural_failures == 0,
          std::string("hand cases ") + (exact ? "exact" : "MISMATCH") + ", symmetry/diagonal failures " +
              std::to_string(structural_failures) + "/1000, non-PD draws rejected " + std::to_string(non_pd) +
              "/1000 (rate " + fmt(non_pd / 1000.0) + ")"};
}

// ---- 4 -------------------------------------------------------------------

constexpr double kLikelihoodTol = 1e-8;

Outcome likelihood_oracle() {
  const std::vector<double> dist{0.0, 120.0, 260.0};
  const model::ModelLayout layout = model::make_layout(dist, 2, 2);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nz;
  std::exponential_distribution<double> ex(1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    model::MSCEParams p = model::MSCEParams::filled(2, 2);
    for (int k = 0; k < 2; ++k)
      for (int l = 0; l < 2; ++l) {
        p.alpha[k][l] = 0.2 + 0.6 * u(rng);
        p.beta[k][l] = -0.2 + 0.5 * u(rng);
        p.mu[k][l] = -0.3 + 0.6 * u(rng);
        p.sigma[k][l] = 0.6 + 0.8 * u(rng);
        p.delta[k][l] = 0.8 + 1.2 * u(rng);
      }
    p.lambda = {0.2 + 0.6 * u(rng)};
    for (auto& v : p.rho) v = 0.3 + 0.6 * u(rng);
    for (auto& v : p.kappa) v = 0.1 + 0.3 * u(rng);
    model::LaplaceDataset data;
    data.remote_km = layout.remote_km;
    data.x.resize(50);
    data.y.resize(50, 4);
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
    const double got = model::msce_logposterior(p, layout, data);
    const double want = oracle::direct_logposterior(p, dist, xs, ys, 2);
    worst = std::max(worst, std::abs(got - want));
  }
  return {worst < kLikelihoodTol, "10 instances (p=2, m=2, n=50), max abs difference " + fmt(worst)};
}

// ---- 5 -------------------------------------------------------------------

constexpr double kMeanTol = 0.05;
constexpr double kCovRelTol = 0.10;

Outcome sampler_calibration() {
  Eigen::Matrix2d cov;
  cov << 1.0, 0.8, 0.8, 1.0;
  const Eigen::Matrix2d prec = cov.inverse();
  const Eigen::Vector2d mean(1.0, -2.0);
  auto lp = [&](const Eigen::VectorXd& v) {
    const Eigen::Vector2d r = v - mean;
    return -0.5 * r.dot(prec * r);
  };
  mcmc::MCMCConfig c;
  c.n2 = 20000;
  c.seed = 5;
  const auto t0 = std::chrono::steady_clock::now();
  const mcmc::PosteriorChain chain =
      mcmc::run_chain(lp, {Eigen::VectorXd::Constant(2, -15.0), Eigen::VectorXd::Constant(2, 15.0)}, c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto kept = mcmc::retained(chain);
  Eigen::Vector2d m = Eigen::Vector2d::Zero();
  for (const auto& v : kept) m += v;
  m /= static_cast<double>(kept.size());
  Eigen::Matrix2d s = Eigen::Matrix2d::Zero();
  for (const auto& v : kept) s += (v - m) * (v - m).transpose();
  s /= static_cast<double>(kept.size() - 1);
  const double mean_err = (m - mean).cwiseAbs().maxCoeff();
  const double cov_err = ((s - cov).array() / cov.array()).abs().maxCoeff();
  return {mean_err < kMeanTol && cov_err < kCovRelTol && secs < 60.0,
          "mean error " + fmt(mean_err) + ", max relative covariance error " + fmt(cov_err) + ", " + fmt(secs) +
              " s"};
}

// ---- 6 -------------------------------------------------------------------

constexpr double kCoverageMin = 0.80;
constexpr double kSigmaLo = 1.2, kSigmaHi = 1.7;
constexpr double kAlphaTol = 0.15;

Outcome synthetic_recovery() {
  const pipeline::PipelineConfig cfg = pipeline::default_config();
  synth::SynthSpec spec;
  spec.layout = pipeline::make_model_layout(cfg);
  spec.true_params = synth::default_truth(spec.layout);
  spec.n_events = 1500;
  spec.seed = 6;
  const model::LaplaceDataset data = synth::generate_conditioned(spec);
  const model::MSCEPosterior post(spec.layout, data);
  mcmc::MCMCConfig mc;  // n1 = 250, n2 = 19750
  mc.seed = 6;
  const auto t0 = std::chrono::steady_clock::now();
  const mcmc::PosteriorChain chain =
      mcmc::run_chain([&](const Eigen::VectorXd& t) { return post(t); }, {post.bounds().lower, post.bounds().upper}, mc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const mcmc::ChainSummary s = mcmc::summarize(chain);
  const Eigen::VectorXd truth = spec.true_params.pack();
  int covered = 0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) covered += s.lo(i) <= truth(i) && truth(i) <= s.hi(i);
  const double coverage = static_cast<double>(covered) / static_cast<double>(truth.size());
  const model::MSCEParams mean = model::MSCEParams::unpack(s.mean, spec.layout.m, spec.layout.n_nod);
  bool sigma_ok = true, alpha_ok = true;
  std::string far;
  for (int k = 0; k < spec.layout.m; ++k) {
    const double sg = mean.sigma[static_cast<std::size_t>(k)].back();
    const double al = mean.alpha[static_cast<std::size_t>(k)].back();
    sigma_ok &= sg >= kSigmaLo && sg <= kSigmaHi;
    alpha_ok &= std::abs(al) <= kAlphaTol;
    far += " q" + std::to_string(k + 1) + "(sigma " + fmt(sg) + ", alpha " + fmt(al) + ")";
  }
  return {coverage >= kCoverageMin && sigma_ok && alpha_ok,
          "coverage " + fmt(coverage) + " of " + std::to_string(truth.size()) + ", adaptive acceptance " +
              fmt(chain.adaptive_acceptance) + ", far node" + far + ", " + fmt(secs) + " s"};
}

// ---- 7 -------------------------------------------------------------------

constexpr double kEqualSigmaRel = 1e-3;

Outcome marginal_pipeline() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  // Shifted exponential per bin, scale growing with the bin index.
  auto draw = [&](int b) { return 2.0 + (1.0 + 0.1 * b) * -std::log1p(-u01(rng)); };
  marginal::BinnedSample s;
  for (int b = 1; b <= 16; ++b)
    for (int i = 0; i < 1000; ++i) s.push(draw(b), b);
  marginal::FitOptions fo;
  const marginal::GPMarginalModel m = marginal::fit_penalized_gp(s, fo);
  // fresh values from the generating process
  std::vector<double> lap;
  for (int i = 0; i < 5000; ++i) {
    const int bin = 1 + i % 16;
    lap.push_back(marginal::pit_to_laplace(draw(bin), bin, m));
  }
  const double ks = oracle::ks_statistic(lap, [](double x) { return std_laplace_cdf(x); });
  const double crit = oracle::ks_critical_1pct(lap.size());
  fo.lambda = 1e9;
  const marginal::GPMarginalModel flat = marginal::fit_penalized_gp(s, fo);
  const auto [lo, hi] = std::minmax_element(flat.sigma.begin(), flat.sigma.end());
  const double spread = (*hi - *lo) / *lo;
  return {ks < crit && spread < kEqualSigmaRel,
          "KS " + fmt(ks) + " vs 1% critical " + fmt(crit) + ", sigma spread at large lambda " + fmt(spread)};
}

// ---- 8 -------------------------------------------------------------------

Outcome registration_rule() {
  using namespace geo;
  const TimePoint t0 = parse_iso8601("2001-03-04T00:00:00Z");
  const Transect t = build_transect(GeoPoint(60.0, -10.0), GeoPoint(61.0, -8.0), 3);
  auto pass_at = [&](const std::string& id, int hours, double shift_km) {
    Pass p{id, {}};
    for (std::size_t j = 0; j < t.size(); ++j) {
      const GeoPoint& r = t.points()[j];
      const double dlon = (j == 1 ? shift_km : 0.0) / (kEarthRadiusKm * M_PI / 180.0 * std::cos(r.lat_deg() * M_PI / 180.0));
      p.observations.push_back({t0 + std::chrono::hours(hours), GeoPoint(r.lat_deg(), r.lon_deg() + dlon), 1.0, 90.0});
    }
    return p;
  };
  std::vector<Pass> passes;
  int expected_reject = 0;
  for (int i = 0; i < 40; ++i) {
    const double shift = 5.0 + 2.0 * i;  // 5 .. 83 km
    passes.push_back(pass_at("p" + std::to_string(i), 12 * i, shift));
    expected_reject += shift > 50.0;
  }
  const Registration reg = register_events({passes}, {"w"}, t);
  bool all_within = true;
  for (double d : reg.report.max_matched_km) all_within &= d <= 50.0;
  const bool reject_ok = static_cast<int>(reg.report.rejected_distance) == expected_reject && all_within;

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> dlat(-0.6, 0.6), dlon(-0.9, 0.9);
  int mismatches = 0;
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<TrackObservation> obs;
    for (int i = 0; i < 6; ++i) {
      const GeoPoint& base = t.points()[static_cast<std::size_t>(i % 3)];
      obs.push_back({t0, GeoPoint(base.lat_deg() + dlat(rng), base.lon_deg() + dlon(rng)), 0.0, 45.0});
    }
    for (const auto& site : t.points()) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t i = 0; i < obs.size(); ++i) {
        const long double d2r = M_PIl / 180.0L;
        const long double p1 = site.lat_deg() * d2r, p2 = obs[i].location.lat_deg() * d2r;
        const long double dl = (obs[i].location.lon_deg() - site.lon_deg()) * d2r;
        const long double h = std::pow(std::sin((p2 - p1) / 2), 2) + std::cos(p1) * std::cos(p2) * std::pow(std::sin(dl / 2), 2);
        const double d = static_cast<double>(2.0L * kEarthRadiusKm * std::asin(std::sqrt(h)));
        if (d < best_d) best_d = d, best = i;
      }
      if (nearest_observation(site, obs).index != best) ++mismatches;
    }
  }
  return {reject_ok && mismatches == 0, "rejected " + std::to_string(reg.report.rejected_distance) + " of " +
                                            std::to_string(passes.size()) + " (expected " +
                                            std::to_string(expected_reject) + "), brute-force mismatches " +
                                            std::to_string(mismatches) + "/1500"};
}

// ---- 9 -------------------------------------------------------------------

constexpr double kNullTarget = 0.05, kNullTol = 0.03;
constexpr double kWithin2SeMin = 0.9;

Outcome diagnostics_calibration() {
  std::mt19937_64 gen(9);
  std::normal_distribution<double> nz;
  int exceed = 0;
  const int pairs = 300;
  for (int i = 0; i < pairs; ++i) {
    std::vector<double> obs(200), sim(200);
    for (auto& v : obs) v = nz(gen);
    for (auto& v : sim) v = nz(gen);
    Rng rng(static_cast<std::uint64_t>(1000 + i));
    const diagnostics::KLPairResult r = diagnostics::kl_pair_test(obs, sim, 500, 25, rng);
    exceed += r.kl > r.null_p95;
  }
  const double frac = static_cast<double>(exceed) / pairs;

  const pipeline::PipelineConfig cfg = pipeline::default_config();
  synth::SynthSpec spec;
  spec.layout = pipeline::make_model_layout(cfg);
  spec.true_params = synth::default_truth(spec.layout);
  spec.n_events = 1500;
  spec.seed = 6;
  const model::LaplaceDataset data = synth::generate_conditioned(spec);
  const diagnostics::QuantileTable table = diagnostics::quantile_validation(
      data, {spec.true_params.pack()}, spec.layout, 0.75, diagnostics::kDefaultProbs, 20000, 9);
  const double within = table.fraction_within(2.0);
  return {std::abs(frac - kNullTarget) <= kNullTol && within >= kWithin2SeMin,
          "KL exceedance fraction " + fmt(frac) + " over " + std::to_string(pairs) +
              " null pairs, quantile rows within 2 s.e. " + fmt(within) + " of " +
              std::to_string(table.rows.size())};
}

// ---- 10 ------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / ("msce_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"seed": 10, "synth": {"n_events": 400},
    "margins": {"n_boot": 10, "merge_sparse_bins": true},
    "mcmc": {"n1": 20, "n2": 400, "n_random_search": 200},
    "diagnose": {"n_sims": 200, "n_boot": 200}, "simulate": {"n_sims": 200}})";
  auto run = [&](const std::string& wd) {
    const std::string cmd = "cd '" + dir.string() + "' && '" MSCE_CLI_PATH "' --config c.json pipeline --workdir " +
                            wd + " >/dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  const int a = run("a"), b = run("b");
  std::size_t files = 0, differ = 0;
  if (a == 0 && b == 0) {
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
      if (!e.is_regular_file()) continue;
      ++files;
      const fs::path rel = fs::relative(e.path(), dir / "a");
      if (!fs::exists(dir / "b" / rel) || slurp(e.path()) != slurp(dir / "b" / rel)) ++differ;
    }
  }
  fs::remove_all(dir);
  return {a == 0 && b == 0 && files > 0 && differ == 0,
          "exit codes " + std::to_string(a) + "/" + std::to_string(b) + ", " + std::to_string(files) +
              " files compared, " + std::to_string(differ) + " differ"};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--only") only = std::atoi(argv[i + 1]);
  set_log_level(LogLevel::error);

  const std::vector<Criterion> all{
      {"distribution identities", distribution_identities},
      {"copula reduction", copula_reduction},
      {"correlation formulas", correlation_formulas},
      {"likelihood oracle", likelihood_oracle},
      {"sampler calibration", sampler_calibration},
      {"end-to-end synthetic recovery", synthetic_recovery},
      {"marginal pipeline", marginal_pipeline},
      {"registration rule", registration_rule},
      {"diagnostics calibration", diagnostics_calibration},
      {"determinism", determinism},
  };
  bool ok = true;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (only != 0 && static_cast<int>(i + 1) != only) continue;
    Outcome o;
    try {
      o = all[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << i + 1 << " [" << all[i].name << "]: " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << std::endl;
    ok &= o.pass;
  }
  return ok ? 0 : 1;
}
