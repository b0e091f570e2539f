#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msce/geo.hpp"
#include "msce/mcmc.hpp"
#include "msce/model.hpp"
#include "msce/serialization.hpp"
#include "msce/synth.hpp"

namespace msce::pipeline {

namespace fs = std::filesystem;

struct TransectConfig {
  double start_lat = 55.0, start_lon = -22.0;
  double end_lat = 67.0, end_lon = -2.0;
  int n_locations = 7;
};

struct RegistrationConfig {
  double max_dist_km = 50.0;
  double time_window_hours = 2.0;
};

struct MarginsConfig {
  double tau = 0.7;
  double tau_lo = 0.6, tau_hi = 0.8;
  int n_boot = 100;
  int folds = 5;
  std::vector<double> lambda_grid;  // empty means the default log grid
  std::size_t min_exceedances = 20;
  bool merge_sparse_bins = false;
};

struct ModelConfig {
  int n_nod = 5;
  double u_quantile = 0.75;
  double rho_unit_km = 100.0;
  double kappa_unit = 5.0;
};

struct ChainConfig {
  mcmc::MCMCConfig mcmc;
  int thin = 10;
  int chains = 1;
};

struct SimulateConfig {
  double x_quantile = 0.95;
  int n_sims = 1000;
};

struct DiagnoseConfig {
  double x_quantile = 0.75;
  double profile_x_quantile = 0.95;
  int n_sims = 1000;
  int n_boot = 500;
  int n_bins = 25;
  int grid_points = 50;
};

struct SynthConfig {
  std::size_t n_events = 1500;
  double u_quantile = 0.75;
  double tau = 0.7;
  double xi = 0.0;
  double corr_range_km = 400.0;
  double cross_corr = 0.8;
  std::size_t far_passes = 5;
  double jitter_km = 5.0;
  std::vector<synth::BinTruth> bins;  // 16 entries
  bool has_truth = false;
  model::MSCEParams truth;  // conditioned synthesis; default_truth when absent
};

struct ReturnLevelConfig {
  int quantity = 1;
  int location = 0;
  double years = 100.0;
  int n_sims = 1000;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::vector<std::string> quantities{"wind_speed", "hs", "tp"};
  TransectConfig transect;
  RegistrationConfig registration;
  MarginsConfig margins;
  ModelConfig model;
  ChainConfig chain;
  SimulateConfig simulate;
  DiagnoseConfig diagnose;
  SynthConfig synth;
  ReturnLevelConfig return_levels;
  std::string workdir = "msce_out";
  std::vector<std::string> tracks;

  // Throws ConfigError.
  void validate() const;
};

PipelineConfig default_config();
std::vector<synth::BinTruth> default_bin_truths();
// Unknown keys and ill-typed values raise ConfigError.
PipelineConfig config_from_json(const serial::json& j, PipelineConfig base = default_config());
PipelineConfig load_config(const fs::path& path);
serial::json config_to_json(const PipelineConfig& c);

geo::Transect make_transect(const TransectConfig& t);
model::ModelLayout make_model_layout(const PipelineConfig& c);

// Conditioning value in the first column of the conditioned format
// (x, then q{k}_loc{j} in remote order) or q1_loc0_value of the registered
// format; only events with x above the layout's u are kept.
model::LaplaceDataset read_laplace_dataset(const fs::path& path, const model::ModelLayout& layout);
std::string conditioned_csv(const VectorXd& x, const RowMatrixXd& y, const model::ModelLayout& layout);

struct StageResult {
  std::string stage;
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  serial::json extra = serial::json::object();
};

StageResult synth_tracks(const PipelineConfig& c, const fs::path& out_dir);
StageResult synth_physical(const PipelineConfig& c, const fs::path& out);
StageResult synth_conditioned(const PipelineConfig& c, const fs::path& out);
StageResult register_tracks(const PipelineConfig& c, const std::vector<fs::path>& tracks, const fs::path& out);
StageResult fit_margins(const PipelineConfig& c, const fs::path& registered, const fs::path& out);
StageResult transform(const PipelineConfig& c, const fs::path& registered, const fs::path& margins,
                      const fs::path& out);
StageResult invert(const PipelineConfig& c, const fs::path& laplace, const fs::path& margins, const fs::path& out);
StageResult return_levels(const PipelineConfig& c, const fs::path& margins, const fs::path& rate_file,
                          const fs::path& out);
StageResult fit_msce(const PipelineConfig& c, const fs::path& laplace, const fs::path& chain_out,
                     const fs::path& params_out);
StageResult simulate(const PipelineConfig& c, const fs::path& chain, const fs::path& out);
StageResult diagnose(const PipelineConfig& c, const fs::path& laplace, const fs::path& chain, const fs::path& out_dir);

// Manifest with paths relative to the manifest's directory and FNV-1a
// hashes; contains no timestamps.
serial::json manifest_json(const StageResult& r, const fs::path& base);
void write_manifest(const StageResult& r, const fs::path& manifest_path);

// All seven stages under workdir, with a top-level manifest.json.
void run_pipeline(const PipelineConfig& c, const fs::path& workdir);

}  // namespace msce::pipeline
