#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "msce/geo.hpp"
#include "msce/model.hpp"

namespace msce::synth {

struct SynthSpec {
  model::MSCEParams true_params;
  model::ModelLayout layout;
  std::size_t n_events = 1000;
  double u_quantile = 0.75;
  std::uint64_t seed = 0;
};

// Conditioning values from the standard Laplace above its u_quantile point
// (inverse CDF), remote values from the model run forward. The returned
// dataset's u is that point.
model::LaplaceDataset generate_conditioned(const SynthSpec& spec);

// Test truth with alpha decaying from about 0.9 to 0 by 600 km, sigma
// rising towards sqrt(2) and delta falling from 2 to 1 with distance.
model::MSCEParams default_truth(const model::ModelLayout& layout);

// Physical-scale truth for one directional-seasonal bin: uniform body on
// [body_lower, threshold], GP tail above.
struct BinTruth {
  double body_lower = 0.0;
  double threshold = 10.0;
  double sigma = 2.0;
};

struct PhysicalSpec {
  std::vector<geo::GeoPoint> transect_points;
  std::vector<std::string> quantities;
  std::vector<BinTruth> bins;  // 16 entries, shared by every (location, quantity)
  double tau = 0.7;
  double xi = 0.0;
  double corr_range_km = 400.0;  // latent field exp(-d / range)
  double cross_corr = 0.8;       // latent correlation between consecutive quantities
  std::size_t n_events = 500;
  std::uint64_t seed = 0;
};

// Throws std::invalid_argument when bins does not hold 16 truths.
geo::RegisteredDataset generate_physical(const PhysicalSpec& spec);

// Value drawn from a bin truth at probability u.
double bin_truth_quantile(const BinTruth& truth, double tau, double xi, double u);

struct TrackSpec {
  std::size_t far_passes = 5;      // conditioning passes displaced beyond 50 km
  double jitter_km = 5.0;          // displacement of matched points
  double secondary_offset_min = 30.0;
};

// Per-quantity track files for a physical dataset: one pass per event and
// quantity with a point near each transect location, plus far passes that
// registration must reject.
std::vector<std::vector<geo::Pass>> generate_tracks(const geo::RegisteredDataset& dataset, const TrackSpec& spec,
                                                    std::uint64_t seed);

}  // namespace msce::synth
