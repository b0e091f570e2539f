#include "msce/synth.hpp"

#include <cmath>
#include <chrono>
#include <limits>
#include <random>
#include <stdexcept>

#include "msce/diagnostics.hpp"
#include "msce/distributions.hpp"
#include "msce/marginal.hpp"
#include "msce/rng.hpp"
#include "msce/special.hpp"

namespace msce::synth {

using model::MSCEParams;
using model::ModelLayout;

namespace {

double uniform01(Rng& rng) { return std::generate_canonical<double, 53>(rng); }

// Angle wrapped into (0, 360].
double wrap_degrees(double a) {
  double w = std::fmod(a, 360.0);
  if (w <= 0.0) w += 360.0;
  return w;
}

geo::GeoPoint displaced(const geo::GeoPoint& p, double north_km, double east_km) {
  constexpr double kKmPerDegree = 6371.0 * M_PI / 180.0;
  const double lat = p.lat_deg() + north_km / kKmPerDegree;
  const double lon = p.lon_deg() + east_km / (kKmPerDegree * std::cos(p.lat_deg() * M_PI / 180.0));
  return geo::GeoPoint(lat, lon);
}

}  // namespace

model::LaplaceDataset generate_conditioned(const SynthSpec& spec) {
  if (spec.n_events < 1) throw std::invalid_argument("n_events must be at least 1");
  if (!(spec.u_quantile > 0.0 && spec.u_quantile < 1.0)) throw std::invalid_argument("u_quantile must lie in (0, 1)");
  const ModelLayout& layout = spec.layout;
  // Fails before any sampling when the truth is not PD.
  factorize_correlation(model::conditional_corr(model::unconditional_corr(spec.true_params, layout)));

  model::LaplaceDataset data;
  data.u = std_laplace_quantile(spec.u_quantile);
  data.remote_km = layout.remote_km;
  Rng x_rng(derive_seed(spec.seed, "conditioning"));
  data.x.resize(static_cast<Eigen::Index>(spec.n_events));
  const double tail = 1.0 - spec.u_quantile;
  for (Eigen::Index i = 0; i < data.x.size(); ++i) {
    // Upper-tail inverse keeps precision far out; 1 - U lies in (0, 1].
    const double q = tail * (1.0 - uniform01(x_rng));
    double x = std_laplace_quantile_upper(q);
    if (!(x > data.u)) x = std::nextafter(data.u, std::numeric_limits<double>::infinity());
    data.x(i) = x;
  }
  Rng z_rng(derive_seed(spec.seed, "residuals"));
  data.y = diagnostics::simulate_given_x(spec.true_params, layout, data.x, z_rng);
  return data;
}

MSCEParams default_truth(const ModelLayout& layout) {
  MSCEParams p = MSCEParams::filled(layout.m, layout.n_nod);
  for (int k = 0; k < layout.m; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    const double shrink = 1.0 - 0.1 * k;  // later quantities slightly weaker
    for (int l = 0; l < layout.n_nod; ++l) {
      const auto ll = static_cast<std::size_t>(l);
      const double d = layout.node_km[ll];
      const double decay = std::max(0.0, 1.0 - d / 600.0);
      p.alpha[kk][ll] = std::max(0.02, 0.9 * shrink * decay);
      p.beta[kk][ll] = 0.3 * decay;
      p.mu[kk][ll] = 0.2 * decay;
      p.sigma[kk][ll] = 0.6 + (std::sqrt(2.0) - 0.6) * (1.0 - decay);
      p.delta[kk][ll] = 1.0 + decay;
    }
  }
  for (auto& v : p.lambda) v = 0.8;
  for (auto& v : p.rho) v = 0.6;
  for (auto& v : p.kappa) v = 0.25;
  return p;
}

double bin_truth_quantile(const BinTruth& t, double tau, double xi, double u) {
  if (u <= tau) return t.body_lower + (t.threshold - t.body_lower) * (u / tau);
  const double s = (1.0 - u) / (1.0 - tau);  // GP survival
  const double y = std::abs(xi) < kGpExponentialLimit ? -t.sigma * std::log(s) : t.sigma * std::expm1(-xi * std::log(s)) / xi;
  return t.threshold + y;
}

geo::RegisteredDataset generate_physical(const PhysicalSpec& spec) {
  if (spec.bins.size() != static_cast<std::size_t>(marginal::kBinCount))
    throw std::invalid_argument("physical synthesis needs a truth for each of the 16 bins, got " +
                                std::to_string(spec.bins.size()));
  if (spec.quantities.empty()) throw std::invalid_argument("physical synthesis needs at least one quantity");
  if (!(spec.tau > 0.0 && spec.tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
  geo::Transect transect(spec.transect_points);
  const std::size_t n_loc = transect.size();
  const std::size_t m = spec.quantities.size();
  const std::size_t d = n_loc * m;

  const MatrixXd dist = transect.pairwise_km();
  MatrixXd corr(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      const auto ka = static_cast<int>(a / n_loc), kb = static_cast<int>(b / n_loc);
      const double lam = std::pow(spec.cross_corr, std::abs(ka - kb));
      corr(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          lam * std::exp(-dist(static_cast<Eigen::Index>(a % n_loc), static_cast<Eigen::Index>(b % n_loc)) /
                         spec.corr_range_km);
    }
  const CorrelationFactor f = factorize_correlation(corr);

  geo::RegisteredDataset out{spec.quantities, transect, {}};
  Rng rng(spec.seed);
  std::normal_distribution<double> normal;
  auto t = geo::parse_iso8601("2000-01-01T06:00:00Z");
  VectorXd g(static_cast<Eigen::Index>(d));
  for (std::size_t e = 0; e < spec.n_events; ++e) {
    t += std::chrono::hours(12 + static_cast<int>(uniform01(rng) * 48.0));
    geo::RegisteredEvent ev;
    ev.time = t;
    ev.season_deg = geo::season_degrees(t);
    const double storm_dir = wrap_degrees(360.0 * uniform01(rng));
    for (auto& v : g) v = normal(rng);
    const VectorXd w = f.lower * g;
    ev.values.resize(d);
    ev.directions.resize(d);
    for (std::size_t s = 0; s < d; ++s) {
      const double dir = wrap_degrees(storm_dir + 20.0 * (uniform01(rng) - 0.5));
      const int bin = marginal::assign_bin(dir, ev.season_deg);
      const double u = special::normal_cdf(w(static_cast<Eigen::Index>(s)));
      const double up = special::normal_upper(w(static_cast<Eigen::Index>(s)));
      const BinTruth& truth = spec.bins[static_cast<std::size_t>(bin - 1)];
      double v;
      if (u <= spec.tau) {
        v = bin_truth_quantile(truth, spec.tau, spec.xi, u);
      } else {
        // Upper tail via the survival probability for precision.
        const double sv = up / (1.0 - spec.tau);
        const double y = std::abs(spec.xi) < kGpExponentialLimit ? -truth.sigma * std::log(sv)
                                                                   : truth.sigma * std::expm1(-spec.xi * std::log(sv)) / spec.xi;
        v = truth.threshold + y;
      }
      ev.values[s] = v;
      ev.directions[s] = dir;
    }
    out.events.push_back(std::move(ev));
  }
  return out;
}

std::vector<std::vector<geo::Pass>> generate_tracks(const geo::RegisteredDataset& dataset, const TrackSpec& spec,
                                                    std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t m = dataset.quantity_count();
  const std::size_t n_loc = dataset.location_count();
  const auto& pts = dataset.transect.points();
  std::vector<std::vector<geo::Pass>> tracks(m);
  auto jitter = [&] {
    const double r = spec.jitter_km * std::sqrt(uniform01(rng));
    const double a = 2.0 * M_PI * uniform01(rng);
    return std::pair<double, double>{r * std::cos(a), r * std::sin(a)};
  };
  for (std::size_t e = 0; e < dataset.events.size(); ++e) {
    const auto& ev = dataset.events[e];
    for (std::size_t k = 0; k < m; ++k) {
      geo::Pass pass;
      pass.id = "q" + std::to_string(k + 1) + "_e" + std::to_string(e + 1);
      const auto when = ev.time + std::chrono::seconds(
                                      k == 0 ? 0 : static_cast<long>(spec.secondary_offset_min * 60.0));
      for (std::size_t j = 0; j < n_loc; ++j) {
        const auto [dn, de] = jitter();
        pass.observations.push_back(
            {when + std::chrono::seconds(static_cast<long>(j)), displaced(pts[j], dn, de),
             ev.values[dataset.slot(k, j)], ev.directions[dataset.slot(k, j)]});
      }
      tracks[k].push_back(std::move(pass));
    }
  }
  // Conditioning passes that miss one location by about 80 km.
  for (std::size_t f = 0; f < spec.far_passes && !dataset.events.empty(); ++f) {
    const auto& ev = dataset.events[f % dataset.events.size()];
    geo::Pass pass;
    pass.id = "far_" + std::to_string(f + 1);
    const auto when = ev.time + std::chrono::hours(6);
    const std::size_t miss = 1 + f % (n_loc - 1);
    for (std::size_t j = 0; j < n_loc; ++j) {
      const double east = j == miss ? 80.0 : 0.0;
      pass.observations.push_back({when, displaced(pts[j], 0.0, east), ev.values[dataset.slot(0, j)],
                                   ev.directions[dataset.slot(0, j)]});
    }
    tracks[0].push_back(std::move(pass));
  }
  return tracks;
}

}  // namespace msce::synth
