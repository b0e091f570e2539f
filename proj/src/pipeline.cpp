#include "msce/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "msce/diagnostics.hpp"
#include "msce/distributions.hpp"
#include "msce/error.hpp"
#include "msce/io.hpp"
#include "msce/log.hpp"
#include "msce/marginal.hpp"

namespace msce::pipeline {

using serial::json;

namespace {

const char* const kVersion = MSCE_VERSION;

void allow_keys(const json& j, const std::set<std::string>& keys, const std::string& section) {
  if (!j.is_object()) throw ConfigError("'" + section + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw ConfigError("unknown key '" + (section.empty() ? k : section + "." + k) + "'");
}

template <typename T>
void take(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + section + "." + key + "' has the wrong type");
  }
}

void take_point(const json& j, const char* key, double& lat, double& lon, const std::string& section) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw ConfigError("'" + section + "." + key + "' must be [lat, lon]");
  lat = v[0].get<double>();
  lon = v[1].get<double>();
}

std::string slot(int k, int j) { return "q" + std::to_string(k) + "_loc" + std::to_string(j); }

std::vector<double> lambda_grid(const MarginsConfig& m) {
  return m.lambda_grid.empty() ? marginal::default_lambda_grid() : m.lambda_grid;
}

struct ChainFile {
  model::ModelLayout layout;
  std::vector<VectorXd> samples;
  VectorXd median;
  VectorXd mean;
};

ChainFile read_chain(const fs::path& path) {
  const json j = serial::parse(io::read_file(path), path.string());
  ChainFile f;
  try {
    f.layout = serial::layout_from_json(j.at("layout"));
    for (const auto& ch : j.at("chains"))
      for (const auto& s : ch.at("samples")) f.samples.push_back(serial::vector_from_json(s));
    f.median = serial::vector_from_json(j.at("summary").at("median"));
    f.mean = serial::vector_from_json(j.at("summary").at("mean"));
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": malformed chain file: " + e.what());
  }
  if (f.samples.empty()) throw InputError(path.string() + ": chain holds no samples");
  return f;
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::string s;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) s += ',';
    s += fields[i];
  }
  return s + '\n';
}

std::string fmt(double v) { return io::format_double(v); }

}  // namespace

std::vector<synth::BinTruth> default_bin_truths() {
  std::vector<synth::BinTruth> bins;
  for (int b = 0; b < marginal::kBinCount; ++b) {
    const double c = std::cos((b % 8) * M_PI / 4.0);
    const bool winter = b < 8;
    bins.push_back({2.0, 11.0 + 2.0 * c + (winter ? 2.0 : 0.0), 2.0 + 0.4 * c + (winter ? 0.5 : 0.0)});
  }
  return bins;
}

PipelineConfig default_config() {
  PipelineConfig c;
  c.synth.bins = default_bin_truths();
  return c;
}

void PipelineConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(!quantities.empty(), "at least one quantity is required (conditioning quantity first)");
  need(std::set<std::string>(quantities.begin(), quantities.end()).size() == quantities.size(),
       "quantity names must be distinct");
  need(transect.n_locations >= 2, "transect.n_locations must be at least 2");
  need(registration.max_dist_km > 0.0, "registration.max_dist_km must be positive");
  need(registration.time_window_hours >= 0.0, "registration.time_window_hours must be non-negative");
  need(margins.tau > 0.0 && margins.tau < 1.0, "margins.tau must lie in (0, 1)");
  need(margins.tau_lo > 0.0 && margins.tau_hi < 1.0 && margins.tau_lo <= margins.tau_hi,
       "margins.tau_range must satisfy 0 < lo <= hi < 1");
  need(margins.n_boot >= 0, "margins.n_boot must be non-negative");
  need(margins.folds >= 2, "margins.folds must be at least 2");
  for (double l : margins.lambda_grid) need(l >= 0.0, "margins.lambda_grid values must be non-negative");
  need(model.n_nod >= 1, "model.n_nod must be at least 1");
  need(model.u_quantile > 0.0 && model.u_quantile < 1.0, "model.u_quantile must lie in (0, 1)");
  need(model.rho_unit_km > 0.0 && model.kappa_unit > 0.0, "model.rho_unit_km and kappa_unit must be positive");
  try {
    chain.mcmc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("mcmc: ") + e.what());
  }
  need(chain.thin >= 1, "mcmc.thin must be at least 1");
  need(chain.chains >= 1, "mcmc.chains must be at least 1");
  need(simulate.x_quantile > model.u_quantile && simulate.x_quantile < 1.0,
       "simulate.x_quantile must lie in (model.u_quantile, 1)");
  need(simulate.n_sims >= 1, "simulate.n_sims must be positive");
  need(diagnose.x_quantile >= model.u_quantile && diagnose.x_quantile < 1.0,
       "diagnose.x_quantile must lie in [model.u_quantile, 1)");
  need(diagnose.profile_x_quantile > model.u_quantile && diagnose.profile_x_quantile < 1.0,
       "diagnose.profile_x_quantile must lie in (model.u_quantile, 1)");
  need(diagnose.n_sims >= 2, "diagnose.n_sims must be at least 2");
  need(diagnose.n_boot >= 200, "diagnose.n_boot must be at least 200");
  need(diagnose.n_bins >= 1 && diagnose.grid_points >= 2, "diagnose.n_bins and grid_points must be positive");
  need(synth.n_events >= 1, "synth.n_events must be positive");
  need(synth.u_quantile > 0.0 && synth.u_quantile < 1.0, "synth.u_quantile must lie in (0, 1)");
  need(synth.tau > 0.0 && synth.tau < 1.0, "synth.tau must lie in (0, 1)");
  need(synth.bins.size() == static_cast<std::size_t>(marginal::kBinCount), "synth.bins must hold 16 bin truths");
  need(return_levels.years > 0.0 && return_levels.n_sims >= 100, "return levels need years > 0 and n_sims >= 100");
}

PipelineConfig config_from_json(const json& j, PipelineConfig c) {
  allow_keys(j, {"seed", "threads", "quantities", "transect", "registration", "margins", "model", "mcmc", "simulate",
                 "diagnose", "synth", "return_levels", "paths"},
             "");
  take(j, "seed", c.seed, "");
  take(j, "threads", c.threads, "");
  take(j, "quantities", c.quantities, "");
  if (j.contains("transect")) {
    const json& t = j.at("transect");
    allow_keys(t, {"start", "end", "n_locations"}, "transect");
    take_point(t, "start", c.transect.start_lat, c.transect.start_lon, "transect");
    take_point(t, "end", c.transect.end_lat, c.transect.end_lon, "transect");
    take(t, "n_locations", c.transect.n_locations, "transect");
  }
  if (j.contains("registration")) {
    const json& r = j.at("registration");
    allow_keys(r, {"max_dist_km", "time_window_hours"}, "registration");
    take(r, "max_dist_km", c.registration.max_dist_km, "registration");
    take(r, "time_window_hours", c.registration.time_window_hours, "registration");
  }
  if (j.contains("margins")) {
    const json& m = j.at("margins");
    allow_keys(m, {"tau", "tau_range", "n_boot", "folds", "lambda_grid", "min_exceedances", "merge_sparse_bins"},
               "margins");
    take(m, "tau", c.margins.tau, "margins");
    if (m.contains("tau_range")) {
      std::vector<double> r;
      take(m, "tau_range", r, "margins");
      if (r.size() != 2) throw ConfigError("'margins.tau_range' must be [lo, hi]");
      c.margins.tau_lo = r[0];
      c.margins.tau_hi = r[1];
    }
    take(m, "n_boot", c.margins.n_boot, "margins");
    take(m, "folds", c.margins.folds, "margins");
    take(m, "lambda_grid", c.margins.lambda_grid, "margins");
    take(m, "min_exceedances", c.margins.min_exceedances, "margins");
    take(m, "merge_sparse_bins", c.margins.merge_sparse_bins, "margins");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    allow_keys(m, {"n_nod", "u_quantile", "rho_unit_km", "kappa_unit"}, "model");
    take(m, "n_nod", c.model.n_nod, "model");
    take(m, "u_quantile", c.model.u_quantile, "model");
    take(m, "rho_unit_km", c.model.rho_unit_km, "model");
    take(m, "kappa_unit", c.model.kappa_unit, "model");
  }
  if (j.contains("mcmc")) {
    const json& m = j.at("mcmc");
    allow_keys(m, {"n1", "n2", "n_random_search", "epsilon", "burn_in", "refresh_every", "thin", "chains"}, "mcmc");
    take(m, "n1", c.chain.mcmc.n1, "mcmc");
    take(m, "n2", c.chain.mcmc.n2, "mcmc");
    take(m, "n_random_search", c.chain.mcmc.n_random_search, "mcmc");
    take(m, "epsilon", c.chain.mcmc.epsilon, "mcmc");
    take(m, "burn_in", c.chain.mcmc.burn_in, "mcmc");
    take(m, "refresh_every", c.chain.mcmc.refresh_every, "mcmc");
    take(m, "thin", c.chain.thin, "mcmc");
    take(m, "chains", c.chain.chains, "mcmc");
  }
  if (j.contains("simulate")) {
    const json& s = j.at("simulate");
    allow_keys(s, {"x_quantile", "n_sims"}, "simulate");
    take(s, "x_quantile", c.simulate.x_quantile, "simulate");
    take(s, "n_sims", c.simulate.n_sims, "simulate");
  }
  if (j.contains("diagnose")) {
    const json& d = j.at("diagnose");
    allow_keys(d, {"x_quantile", "profile_x_quantile", "n_sims", "n_boot", "n_bins", "grid_points"}, "diagnose");
    take(d, "x_quantile", c.diagnose.x_quantile, "diagnose");
    take(d, "profile_x_quantile", c.diagnose.profile_x_quantile, "diagnose");
    take(d, "n_sims", c.diagnose.n_sims, "diagnose");
    take(d, "n_boot", c.diagnose.n_boot, "diagnose");
    take(d, "n_bins", c.diagnose.n_bins, "diagnose");
    take(d, "grid_points", c.diagnose.grid_points, "diagnose");
  }
  if (j.contains("synth")) {
    const json& s = j.at("synth");
    allow_keys(s, {"n_events", "u_quantile", "tau", "xi", "corr_range_km", "cross_corr", "far_passes", "jitter_km",
                   "bins", "truth"},
               "synth");
    take(s, "n_events", c.synth.n_events, "synth");
    take(s, "u_quantile", c.synth.u_quantile, "synth");
    take(s, "tau", c.synth.tau, "synth");
    take(s, "xi", c.synth.xi, "synth");
    take(s, "corr_range_km", c.synth.corr_range_km, "synth");
    take(s, "cross_corr", c.synth.cross_corr, "synth");
    take(s, "far_passes", c.synth.far_passes, "synth");
    take(s, "jitter_km", c.synth.jitter_km, "synth");
    if (s.contains("bins")) {
      c.synth.bins.clear();
      for (const auto& b : s.at("bins")) {
        allow_keys(b, {"body_lower", "threshold", "sigma"}, "synth.bins");
        synth::BinTruth t;
        take(b, "body_lower", t.body_lower, "synth.bins");
        take(b, "threshold", t.threshold, "synth.bins");
        take(b, "sigma", t.sigma, "synth.bins");
        c.synth.bins.push_back(t);
      }
    }
    if (s.contains("truth")) {
      c.synth.truth = serial::params_from_json(s.at("truth"));
      c.synth.has_truth = true;
    }
  }
  if (j.contains("return_levels")) {
    const json& r = j.at("return_levels");
    allow_keys(r, {"quantity", "location", "years", "n_sims"}, "return_levels");
    take(r, "quantity", c.return_levels.quantity, "return_levels");
    take(r, "location", c.return_levels.location, "return_levels");
    take(r, "years", c.return_levels.years, "return_levels");
    take(r, "n_sims", c.return_levels.n_sims, "return_levels");
  }
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    allow_keys(p, {"workdir", "tracks"}, "paths");
    take(p, "workdir", c.workdir, "paths");
    take(p, "tracks", c.tracks, "paths");
  }
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const InputError&) {
    throw ConfigError("cannot read config file " + path.string());
  }
  return config_from_json(serial::parse(text, path.string()));
}

json config_to_json(const PipelineConfig& c) {
  json bins = json::array();
  for (const auto& b : c.synth.bins)
    bins.push_back({{"body_lower", b.body_lower}, {"threshold", b.threshold}, {"sigma", b.sigma}});
  json synth = {{"n_events", c.synth.n_events},   {"u_quantile", c.synth.u_quantile}, {"tau", c.synth.tau},
                {"xi", c.synth.xi},               {"corr_range_km", c.synth.corr_range_km},
                {"cross_corr", c.synth.cross_corr}, {"far_passes", c.synth.far_passes},
                {"jitter_km", c.synth.jitter_km}, {"bins", bins}};
  if (c.synth.has_truth) synth["truth"] = serial::to_json(c.synth.truth);
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"quantities", c.quantities},
      {"transect",
       {{"start", {c.transect.start_lat, c.transect.start_lon}},
        {"end", {c.transect.end_lat, c.transect.end_lon}},
        {"n_locations", c.transect.n_locations}}},
      {"registration",
       {{"max_dist_km", c.registration.max_dist_km}, {"time_window_hours", c.registration.time_window_hours}}},
      {"margins",
       {{"tau", c.margins.tau},
        {"tau_range", {c.margins.tau_lo, c.margins.tau_hi}},
        {"n_boot", c.margins.n_boot},
        {"folds", c.margins.folds},
        {"lambda_grid", lambda_grid(c.margins)},
        {"min_exceedances", c.margins.min_exceedances},
        {"merge_sparse_bins", c.margins.merge_sparse_bins}}},
      {"model",
       {{"n_nod", c.model.n_nod},
        {"u_quantile", c.model.u_quantile},
        {"rho_unit_km", c.model.rho_unit_km},
        {"kappa_unit", c.model.kappa_unit}}},
      {"mcmc",
       {{"n1", c.chain.mcmc.n1},
        {"n2", c.chain.mcmc.n2},
        {"n_random_search", c.chain.mcmc.n_random_search},
        {"epsilon", c.chain.mcmc.epsilon},
        {"burn_in", c.chain.mcmc.burn_in},
        {"refresh_every", c.chain.mcmc.refresh_every},
        {"thin", c.chain.thin},
        {"chains", c.chain.chains}}},
      {"simulate", {{"x_quantile", c.simulate.x_quantile}, {"n_sims", c.simulate.n_sims}}},
      {"diagnose",
       {{"x_quantile", c.diagnose.x_quantile},
        {"profile_x_quantile", c.diagnose.profile_x_quantile},
        {"n_sims", c.diagnose.n_sims},
        {"n_boot", c.diagnose.n_boot},
        {"n_bins", c.diagnose.n_bins},
        {"grid_points", c.diagnose.grid_points}}},
      {"synth", synth},
      {"return_levels",
       {{"quantity", c.return_levels.quantity},
        {"location", c.return_levels.location},
        {"years", c.return_levels.years},
        {"n_sims", c.return_levels.n_sims}}},
      {"paths", {{"workdir", c.workdir}, {"tracks", c.tracks}}},
  };
}

geo::Transect make_transect(const TransectConfig& t) {
  try {
    return geo::build_transect(geo::GeoPoint(t.start_lat, t.start_lon), geo::GeoPoint(t.end_lat, t.end_lon),
                               t.n_locations);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("transect: ") + e.what());
  }
}

model::ModelLayout make_model_layout(const PipelineConfig& c) {
  model::ModelLayout l;
  try {
    l = model::make_layout(make_transect(c.transect), static_cast<int>(c.quantities.size()), c.model.n_nod);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model layout: ") + e.what());
  }
  l.rho_unit_km = c.model.rho_unit_km;
  l.kappa_unit = c.model.kappa_unit;
  l.u = std_laplace_quantile(c.model.u_quantile);
  return l;
}

std::string conditioned_csv(const VectorXd& x, const RowMatrixXd& y, const model::ModelLayout& layout) {
  std::vector<std::string> head{"x"};
  for (int k = 1; k <= layout.m; ++k)
    for (int j = 1; j <= layout.p; ++j) head.push_back(slot(k, j));
  std::string s = csv_line(head);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    s += fmt(x(i));
    for (Eigen::Index c = 0; c < y.cols(); ++c) s += ',' + fmt(y(i, c));
    s += '\n';
  }
  return s;
}

model::LaplaceDataset read_laplace_dataset(const fs::path& path, const model::ModelLayout& layout) {
  const io::CsvTable t = io::read_csv(path);
  const int mp = layout.m * layout.p;
  std::size_t x_col;
  std::vector<std::size_t> cols;
  if (!t.header.empty() && t.header[0] == "x") {
    x_col = 0;
    for (int k = 1; k <= layout.m; ++k)
      for (int j = 1; j <= layout.p; ++j) cols.push_back(t.column(slot(k, j)));
  } else {
    x_col = t.column("q1_loc0_value");
    for (int k = 1; k <= layout.m; ++k)
      for (int j = 1; j <= layout.p; ++j) cols.push_back(t.column(slot(k, j) + "_value"));
  }
  std::vector<std::size_t> keep;
  std::vector<double> xs;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double x = io::parse_double(t.rows[r][x_col], r + 1, t.header[x_col]);
    if (x > layout.u) {
      keep.push_back(r);
      xs.push_back(x);
    }
  }
  model::LaplaceDataset d;
  d.u = layout.u;
  d.remote_km = layout.remote_km;
  d.x = Eigen::Map<VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  d.y.resize(static_cast<Eigen::Index>(keep.size()), mp);
  for (std::size_t i = 0; i < keep.size(); ++i)
    for (int c = 0; c < mp; ++c) {
      const std::size_t col = cols[static_cast<std::size_t>(c)];
      d.y(static_cast<Eigen::Index>(i), c) = io::parse_double(t.rows[keep[i]][col], keep[i] + 1, t.header[col]);
    }
  if (keep.empty())
    throw InputError(path.string() + ": no event has a conditioning value above u = " + fmt(layout.u));
  return d;
}

// ---- stages -----------------------------------------------------------------

namespace {

synth::PhysicalSpec physical_spec(const PipelineConfig& c) {
  const geo::Transect tr = make_transect(c.transect);
  synth::PhysicalSpec s;
  s.transect_points = tr.points();
  s.quantities = c.quantities;
  s.bins = c.synth.bins;
  s.tau = c.synth.tau;
  s.xi = c.synth.xi;
  s.corr_range_km = c.synth.corr_range_km;
  s.cross_corr = c.synth.cross_corr;
  s.n_events = c.synth.n_events;
  s.seed = derive_seed(c.seed, "synth-physical");
  return s;
}

}  // namespace

StageResult synth_physical(const PipelineConfig& c, const fs::path& out) {
  StageResult r{"synth", derive_seed(c.seed, "synth-physical"), {}, {out}, json::object()};
  io::write_atomic(out, io::registered_csv(synth::generate_physical(physical_spec(c))));
  return r;
}

StageResult synth_tracks(const PipelineConfig& c, const fs::path& out_dir) {
  StageResult r{"synth", derive_seed(c.seed, "synth-tracks"), {}, {}, json::object()};
  const geo::RegisteredDataset data = synth::generate_physical(physical_spec(c));
  synth::TrackSpec ts;
  ts.far_passes = c.synth.far_passes;
  ts.jitter_km = c.synth.jitter_km;
  const auto tracks = synth::generate_tracks(data, ts, r.seed);
  for (std::size_t k = 0; k < tracks.size(); ++k) {
    const fs::path p = out_dir / ("q" + std::to_string(k + 1) + ".csv");
    io::write_atomic(p, io::tracks_csv(tracks[k]));
    r.outputs.push_back(p);
  }
  const fs::path truth = out_dir / "truth_registered.csv";
  io::write_atomic(truth, io::registered_csv(data));
  r.outputs.push_back(truth);
  r.extra["events"] = data.events.size();
  r.extra["far_passes"] = ts.far_passes;
  return r;
}

StageResult synth_conditioned(const PipelineConfig& c, const fs::path& out) {
  StageResult r{"synth", derive_seed(c.seed, "synth-conditioned"), {}, {out}, json::object()};
  synth::SynthSpec s;
  s.layout = make_model_layout(c);
  s.true_params = c.synth.has_truth ? c.synth.truth : synth::default_truth(s.layout);
  if (s.true_params.m != s.layout.m || s.true_params.n_nod != s.layout.n_nod)
    throw ConfigError("synth.truth does not match the quantity count and model.n_nod");
  s.n_events = c.synth.n_events;
  s.u_quantile = c.synth.u_quantile;
  s.seed = r.seed;
  const model::LaplaceDataset d = synth::generate_conditioned(s);
  io::write_atomic(out, conditioned_csv(d.x, d.y, s.layout));
  r.extra["truth"] = serial::to_json(s.true_params);
  return r;
}

StageResult register_tracks(const PipelineConfig& c, const std::vector<fs::path>& tracks, const fs::path& out) {
  if (tracks.size() != c.quantities.size())
    throw ConfigError("need one track file per quantity: got " + std::to_string(tracks.size()) + " for " +
                      std::to_string(c.quantities.size()) + " quantities");
  StageResult r{"register", 0, tracks, {out}, json::object()};
  std::vector<std::vector<geo::Pass>> passes;
  for (const auto& p : tracks) passes.push_back(io::read_tracks(p));
  geo::RegistrationOptions opt;
  opt.max_dist_km = c.registration.max_dist_km;
  opt.time_window_hours = c.registration.time_window_hours;
  const geo::Registration reg = geo::register_events(passes, c.quantities, make_transect(c.transect), opt);
  io::write_atomic(out, io::registered_csv(reg.dataset));
  r.extra["report"] = {{"input_passes", reg.report.input_passes},
                       {"accepted", reg.report.accepted},
                       {"rejected_distance", reg.report.rejected_distance},
                       {"dropped_incomplete", reg.report.dropped_incomplete},
                       {"skipped_empty", reg.report.skipped_empty}};
  return r;
}

StageResult fit_margins(const PipelineConfig& c, const fs::path& registered, const fs::path& out) {
  StageResult r{"fit-margins", derive_seed(c.seed, "fit-margins"), {registered}, {out}, json::object()};
  const geo::RegisteredDataset data = io::read_registered(registered, make_transect(c.transect), c.quantities);
  if (data.events.empty()) throw InputError(registered.string() + ": no events");
  const std::vector<double> grid = lambda_grid(c.margins);
  json models = json::array();
  for (std::size_t k = 0; k < data.quantity_count(); ++k)
    for (std::size_t j = 0; j < data.location_count(); ++j) {
      marginal::BinnedSample sample;
      for (const auto& ev : data.events)
        sample.push(ev.values[data.slot(k, j)], marginal::assign_bin(ev.directions[data.slot(k, j)], ev.season_deg));
      marginal::FitOptions fo;
      fo.tau = c.margins.tau;
      fo.min_exceedances = c.margins.min_exceedances;
      fo.merge_sparse_bins = c.margins.merge_sparse_bins;
      const std::uint64_t seed = derive_seed(r.seed, static_cast<std::uint64_t>(k * 1000 + j));
      const marginal::CrossValidationResult cv =
          marginal::select_penalty_cv(sample, fo, grid, c.margins.folds, derive_seed(seed, "cv"));
      fo.lambda = cv.lambda;
      marginal::GPMarginalModel fitted;
      std::size_t failures = 0;
      if (c.margins.n_boot > 0) {
        marginal::BootstrapOptions bo;
        bo.n_boot = c.margins.n_boot;
        bo.tau_lo = c.margins.tau_lo;
        bo.tau_hi = c.margins.tau_hi;
        bo.seed = derive_seed(seed, "bootstrap");
        bo.fit = fo;
        marginal::MarginalEnsemble ens = marginal::bootstrap_margins(sample, bo);
        fitted = std::move(ens.median_model);
        failures = ens.failures;
      } else {
        fitted = marginal::fit_penalized_gp(sample, fo);
        fitted.seed = seed;
      }
      json cvj = {{"lambda", cv.lambda}, {"grid", cv.grid}, {"skipped_terms", cv.skipped_terms}};
      json scores = json::array();
      for (double s : cv.scores) scores.push_back(std::isfinite(s) ? json(s) : json(nullptr));
      cvj["scores"] = scores;
      models.push_back({{"quantity", k + 1},
                        {"location", j},
                        {"cv", cvj},
                        {"bootstrap_failures", failures},
                        {"model", serial::to_json(fitted)}});
    }
  const json doc = {{"quantities", c.quantities},
                    {"n_locations", data.location_count()},
                    {"n_events", data.events.size()},
                    {"models", models}};
  io::write_atomic(out, serial::dump(doc));
  return r;
}

namespace {

struct MarginSet {
  std::size_t m = 0, n_loc = 0;
  std::vector<marginal::GPMarginalModel> models;  // [k * n_loc + j]
  const marginal::GPMarginalModel& at(std::size_t k, std::size_t j) const { return models[k * n_loc + j]; }
};

MarginSet read_margins(const fs::path& path, const PipelineConfig& c) {
  const json j = serial::parse(io::read_file(path), path.string());
  MarginSet s;
  try {
    s.m = j.at("quantities").size();
    s.n_loc = j.at("n_locations").get<std::size_t>();
    s.models.resize(s.m * s.n_loc);
    std::vector<bool> seen(s.models.size(), false);
    for (const auto& e : j.at("models")) {
      const auto k = e.at("quantity").get<std::size_t>() - 1, loc = e.at("location").get<std::size_t>();
      if (k >= s.m || loc >= s.n_loc) throw InputError(path.string() + ": model index out of range");
      s.models[k * s.n_loc + loc] = serial::margin_from_json(e.at("model"));
      seen[k * s.n_loc + loc] = true;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
      throw InputError(path.string() + ": missing marginal models");
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": malformed margins file: " + e.what());
  }
  if (s.m != c.quantities.size() || s.n_loc != static_cast<std::size_t>(c.transect.n_locations))
    throw InputError(path.string() + ": margins do not match the configured quantities and transect");
  return s;
}

geo::RegisteredDataset map_values(const geo::RegisteredDataset& in, const MarginSet& ms, bool to_laplace) {
  geo::RegisteredDataset out = in;
  for (std::size_t e = 0; e < out.events.size(); ++e) {
    auto& ev = out.events[e];
    for (std::size_t k = 0; k < out.quantity_count(); ++k)
      for (std::size_t j = 0; j < out.location_count(); ++j) {
        const std::size_t s = out.slot(k, j);
        const int bin = marginal::assign_bin(ev.directions[s], ev.season_deg);
        const auto& model = ms.at(k, j);
        if (!model.has_data(bin))
          throw ComputationError("EMPTY_BIN", "event " + std::to_string(e + 1) + ": bin " + std::to_string(bin) +
                                                  " of quantity " + std::to_string(k + 1) + " at location " +
                                                  std::to_string(j) + " has no fitted model");
        ev.values[s] = to_laplace ? marginal::pit_to_laplace(ev.values[s], bin, model)
                                  : marginal::laplace_to_physical(ev.values[s], bin, model);
      }
  }
  return out;
}

}  // namespace

StageResult transform(const PipelineConfig& c, const fs::path& registered, const fs::path& margins,
                      const fs::path& out) {
  StageResult r{"transform", 0, {registered, margins}, {out}, json::object()};
  const MarginSet ms = read_margins(margins, c);
  const geo::RegisteredDataset data = io::read_registered(registered, make_transect(c.transect), c.quantities);
  io::write_atomic(out, io::registered_csv(map_values(data, ms, true)));
  return r;
}

StageResult invert(const PipelineConfig& c, const fs::path& laplace, const fs::path& margins, const fs::path& out) {
  StageResult r{"invert", 0, {laplace, margins}, {out}, json::object()};
  const MarginSet ms = read_margins(margins, c);
  const geo::RegisteredDataset data = io::read_registered(laplace, make_transect(c.transect), c.quantities);
  io::write_atomic(out, io::registered_csv(map_values(data, ms, false)));
  return r;
}

StageResult return_levels(const PipelineConfig& c, const fs::path& margins, const fs::path& rate_file,
                          const fs::path& out) {
  StageResult r{"return-levels", derive_seed(c.seed, "return-levels"), {margins, rate_file}, {out}, json::object()};
  const MarginSet ms = read_margins(margins, c);
  const auto& rl = c.return_levels;
  if (rl.quantity < 1 || static_cast<std::size_t>(rl.quantity) > ms.m || rl.location < 0 ||
      static_cast<std::size_t>(rl.location) >= ms.n_loc)
    throw ConfigError("return-levels: quantity or location out of range");
  const io::CsvTable t = io::read_csv(rate_file);
  const std::size_t cb = t.column("bin"), cr = t.column("rate");
  std::vector<double> rates(marginal::kBinCount, 0.0);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const double b = io::parse_double(t.rows[i][cb], i + 1, "bin");
    if (b != std::floor(b) || b < 1 || b > marginal::kBinCount)
      throw InputError(rate_file.string() + ": row " + std::to_string(i + 1) + ": bin must be an integer in 1..16",
                       i + 1);
    rates[static_cast<std::size_t>(b) - 1] = io::parse_double(t.rows[i][cr], i + 1, "rate");
  }
  const auto& model = ms.at(static_cast<std::size_t>(rl.quantity - 1), static_cast<std::size_t>(rl.location));
  const marginal::ReturnLevelSummary s = marginal::return_level_sim(model, rates, rl.years, rl.n_sims, r.seed);
  std::string csv = "quantity,location,years,q025,q50,q975\n";
  csv += csv_line({std::to_string(rl.quantity), std::to_string(rl.location), fmt(rl.years), fmt(s.q025), fmt(s.q50),
                   fmt(s.q975)});
  io::write_atomic(out, csv);
  return r;
}

StageResult fit_msce(const PipelineConfig& c, const fs::path& laplace, const fs::path& chain_out,
                     const fs::path& params_out) {
  StageResult r{"fit-msce", derive_seed(c.seed, "fit-msce"), {laplace}, {chain_out, params_out}, json::object()};
  const model::ModelLayout layout = make_model_layout(c);
  const model::LaplaceDataset data = read_laplace_dataset(laplace, layout);
  const model::ParamBounds pb = model::parameter_bounds(layout.m, layout.n_nod);
  const mcmc::Bounds bounds{pb.lower, pb.upper};
  mcmc::MCMCConfig mc = c.chain.mcmc;
  mc.seed = r.seed;
  auto make = [&]() -> mcmc::LogPosterior {
    auto post = std::make_shared<model::MSCEPosterior>(layout, data);
    return [post](const VectorXd& th) { return (*post)(th); };
  };
  const std::vector<mcmc::PosteriorChain> chains = mcmc::run_chains(make, bounds, mc, c.chain.chains);

  mcmc::PosteriorChain pooled;
  json chain_docs = json::array();
  for (const auto& ch : chains) {
    const auto kept = mcmc::retained(ch);
    json samples = json::array(), lps = json::array();
    const std::size_t first = ch.samples.size() - kept.size();
    for (std::size_t i = 0; i < kept.size(); i += static_cast<std::size_t>(c.chain.thin)) {
      samples.push_back(serial::vector_json(kept[i]));
      lps.push_back(ch.logpost[first + i]);
    }
    pooled.samples.insert(pooled.samples.end(), kept.begin(), kept.end());
    chain_docs.push_back({{"seed", ch.seed},
                          {"warmup_acceptance", ch.warmup_acceptance},
                          {"adaptive_acceptance", ch.adaptive_acceptance},
                          {"burn_in", ch.burn_in},
                          {"covariance_fallbacks", ch.covariance_fallbacks},
                          {"thin", c.chain.thin},
                          {"samples", samples},
                          {"logpost", lps}});
  }
  const mcmc::ChainSummary s = mcmc::summarize(pooled);
  const json cfg = config_to_json(c);
  const json doc = {{"config", {{"mcmc", cfg.at("mcmc")}, {"model", cfg.at("model")}}},
                    {"seed", r.seed},
                    {"n_events", data.size()},
                    {"layout", serial::to_json(layout)},
                    {"parameter_names", model::parameter_names(layout.m, layout.n_nod)},
                    {"chains", chain_docs},
                    {"summary",
                     {{"samples_used", s.used},
                      {"mean", serial::vector_json(s.mean)},
                      {"median", serial::vector_json(s.median)},
                      {"lo", serial::vector_json(s.lo)},
                      {"hi", serial::vector_json(s.hi)}}}};
  io::write_atomic(chain_out, serial::dump(doc));
  const json params = {
      {"layout", serial::to_json(layout)},
      {"posterior_mean", serial::to_json(model::MSCEParams::unpack(s.mean, layout.m, layout.n_nod))},
      {"posterior_median", serial::to_json(model::MSCEParams::unpack(s.median, layout.m, layout.n_nod))},
      {"lo", serial::to_json(model::MSCEParams::unpack(s.lo, layout.m, layout.n_nod))},
      {"hi", serial::to_json(model::MSCEParams::unpack(s.hi, layout.m, layout.n_nod))}};
  io::write_atomic(params_out, serial::dump(params));
  r.extra["n_events"] = data.size();
  return r;
}

StageResult simulate(const PipelineConfig& c, const fs::path& chain, const fs::path& out) {
  StageResult r{"simulate", derive_seed(c.seed, "simulate"), {chain}, {out}, json::object()};
  const ChainFile cf = read_chain(chain);
  const diagnostics::ChainSimulation sim = diagnostics::simulate_conditional(
      cf.samples, cf.layout, c.simulate.x_quantile, static_cast<std::size_t>(c.simulate.n_sims), r.seed);
  const VectorXd x = VectorXd::Constant(sim.values.rows(), sim.x);
  io::write_atomic(out, conditioned_csv(x, sim.values, cf.layout));
  r.extra["skipped_draws"] = sim.skipped;
  return r;
}

StageResult diagnose(const PipelineConfig& c, const fs::path& laplace, const fs::path& chain, const fs::path& out_dir) {
  StageResult r{"diagnose", derive_seed(c.seed, "diagnose"), {laplace, chain}, {}, json::object()};
  const ChainFile cf = read_chain(chain);
  const model::ModelLayout& layout = cf.layout;
  const model::LaplaceDataset data = read_laplace_dataset(laplace, layout);
  const model::MSCEParams median = model::MSCEParams::unpack(cf.median, layout.m, layout.n_nod);
  const auto& dc = c.diagnose;

  std::vector<double> grid;
  // profiles are only defined between the first and last node
  const double near = layout.node_km.front(), far = layout.node_km.back();
  for (int i = 0; i < dc.grid_points; ++i) grid.push_back(near + (far - near) * i / (dc.grid_points - 1));
  const diagnostics::ConditionalProfile prof =
      diagnostics::conditional_profiles(cf.samples, layout, dc.profile_x_quantile, grid);
  std::string pcsv = "distance,quantity,mean,lo,hi,sd,sd_lo,sd_hi\n";
  for (int k = 0; k < layout.m; ++k)
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto kk = static_cast<std::size_t>(k);
      pcsv += csv_line({fmt(grid[i]), std::to_string(k + 1), fmt(prof.mean[kk][i]), fmt(prof.lo[kk][i]),
                        fmt(prof.hi[kk][i]), fmt(prof.sd[kk][i]), fmt(prof.sd_lo[kk][i]), fmt(prof.sd_hi[kk][i])});
    }
  const fs::path profiles = out_dir / "profiles.csv";
  io::write_atomic(profiles, pcsv);

  const diagnostics::QuantileTable qt =
      diagnostics::quantile_validation(data, cf.samples, layout, dc.x_quantile, diagnostics::kDefaultProbs,
                                       static_cast<std::size_t>(dc.n_sims), derive_seed(r.seed, "quantiles"));
  std::string qcsv = "j,k,prob,observed,simulated\n";
  for (const auto& row : qt.rows)
    qcsv += csv_line({std::to_string(row.j), std::to_string(row.k), fmt(row.prob), fmt(row.observed),
                      fmt(row.simulated)});
  const fs::path quantiles = out_dir / "quantiles.csv";
  io::write_atomic(quantiles, qcsv);

  const diagnostics::KLTestResult kl =
      diagnostics::kl_bootstrap_test(data, median, layout, dc.x_quantile, dc.n_boot, dc.n_bins, derive_seed(r.seed, "kl"));
  std::string kcsv = "j,k,kl,null_p95,tail_prob\n";
  for (const auto& row : kl.rows)
    kcsv += csv_line({std::to_string(row.j), std::to_string(row.k), fmt(row.result.kl), fmt(row.result.null_p95),
                      fmt(row.result.tail_prob)});
  const fs::path klp = out_dir / "kl.csv";
  io::write_atomic(klp, kcsv);
  r.outputs = {profiles, quantiles, klp};

  // Residual comparison data: margins per pair and joint scatter per pair of pairs.
  const RowMatrixXd obs = diagnostics::observed_residuals(data, median, layout, dc.x_quantile);
  Rng rng(derive_seed(r.seed, "residual-pairs"));
  const RowMatrixXd sim = diagnostics::sample_residuals(median, layout, static_cast<std::size_t>(obs.rows()), rng);
  const fs::path pairs = out_dir / "residual_pairs";
  const model::RemoteIndex idx = layout.index();
  auto tag = [&](int a) {
    const auto [j, k] = idx.pair_at(a + 1);
    return "j" + std::to_string(j) + "_k" + std::to_string(k);
  };
  const auto mp = static_cast<int>(obs.cols());
  for (int a = 0; a < mp; ++a) {
    std::string s = "observed,simulated\n";
    for (Eigen::Index i = 0; i < obs.rows(); ++i) s += fmt(obs(i, a)) + ',' + fmt(sim(i, a)) + '\n';
    const fs::path p = pairs / (tag(a) + ".csv");
    io::write_atomic(p, s);
    r.outputs.push_back(p);
    for (int b = a + 1; b < mp; ++b) {
      std::string t = "obs_a,obs_b,sim_a,sim_b\n";
      for (Eigen::Index i = 0; i < obs.rows(); ++i)
        t += csv_line({fmt(obs(i, a)), fmt(obs(i, b)), fmt(sim(i, a)), fmt(sim(i, b))});
      const fs::path q = pairs / (tag(a) + "__" + tag(b) + ".csv");
      io::write_atomic(q, t);
      r.outputs.push_back(q);
    }
  }
  r.extra["kl_exceedance_fraction"] = kl.exceedance_fraction;
  r.extra["kl_skipped_pairs"] = kl.skipped;
  r.extra["quantile_fraction_within_2se"] = qt.fraction_within(2.0);
  r.extra["warnings"] = qt.warnings;
  return r;
}

json manifest_json(const StageResult& r, const fs::path& base) {
  const fs::path b = fs::absolute(base).lexically_normal();
  auto entries = [&](const std::vector<fs::path>& paths) {
    json a = json::array();
    for (const auto& p : paths) {
      const fs::path rel = fs::absolute(p).lexically_normal().lexically_relative(b);
      json e = {{"path", rel.generic_string()}};
      e["fnv1a64"] = fs::exists(p) ? json(io::hex64(io::file_hash(p))) : json(nullptr);
      a.push_back(e);
    }
    return a;
  };
  json j = {{"stage", r.stage},
            {"version", kVersion},
            {"seed", r.seed},
            {"inputs", entries(r.inputs)},
            {"outputs", entries(r.outputs)}};
  if (!r.extra.empty()) j["details"] = r.extra;
  return j;
}

void write_manifest(const StageResult& r, const fs::path& manifest_path) {
  const fs::path base = manifest_path.has_parent_path() ? manifest_path.parent_path() : fs::path(".");
  io::write_atomic(manifest_path, serial::dump(manifest_json(r, base)));
}

void run_pipeline(const PipelineConfig& c, const fs::path& workdir) {
  c.validate();
  fs::create_directories(workdir);
  std::vector<StageResult> stages;

  std::vector<fs::path> tracks;
  if (c.tracks.empty()) {
    stages.push_back(synth_tracks(c, workdir / "tracks"));
    for (std::size_t k = 0; k < c.quantities.size(); ++k) tracks.push_back(stages.back().outputs[k]);
  } else {
    StageResult skipped{"synth", 0, {}, {}, {{"status", "skipped: track files supplied"}}};
    stages.push_back(skipped);
    for (const auto& t : c.tracks) tracks.emplace_back(t);
  }
  log_info("pipeline: register");
  stages.push_back(register_tracks(c, tracks, workdir / "registered.csv"));
  log_info("pipeline: fit-margins");
  stages.push_back(fit_margins(c, workdir / "registered.csv", workdir / "margins.json"));
  log_info("pipeline: transform");
  stages.push_back(transform(c, workdir / "registered.csv", workdir / "margins.json", workdir / "laplace.csv"));
  log_info("pipeline: fit-msce");
  stages.push_back(fit_msce(c, workdir / "laplace.csv", workdir / "chain.json", workdir / "params.json"));
  log_info("pipeline: simulate");
  stages.push_back(simulate(c, workdir / "chain.json", workdir / "simulations.csv"));
  log_info("pipeline: diagnose");
  stages.push_back(diagnose(c, workdir / "laplace.csv", workdir / "chain.json", workdir / "diagnostics"));

  json cfg = config_to_json(c);
  cfg.erase("paths");
  cfg.erase("threads");
  json list = json::array();
  for (const auto& s : stages) list.push_back(manifest_json(s, workdir));
  const json doc = {{"pipeline", "msce"}, {"version", kVersion}, {"seed", c.seed}, {"config", cfg}, {"stages", list}};
  io::write_atomic(workdir / "manifest.json", serial::dump(doc));
}

}  // namespace msce::pipeline
