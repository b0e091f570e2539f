#include "msce/cli.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <cstring>
#include <iostream>
#include <optional>

#include "msce/error.hpp"
#include "msce/io.hpp"
#include "msce/log.hpp"
#include "msce/parallel.hpp"
#include "msce/pipeline.hpp"

namespace msce::cli {

namespace {

using pipeline::fs::path;
using pipeline::PipelineConfig;

std::string pair_text(double a, double b) { return io::format_double(a) + "," + io::format_double(b); }

void parse_pair(const std::string& text, const std::string& flag, double& a, double& b) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ConfigError(flag + " expects two comma-separated numbers, got '" + text + "'");
  try {
    a = io::parse_double(text.substr(0, comma), 0, flag);
    b = io::parse_double(text.substr(comma + 1), 0, flag);
  } catch (const InputError&) {
    throw ConfigError(flag + " expects two comma-separated numbers, got '" + text + "'");
  }
}

LogLevel parse_level(const std::string& s) {
  if (s == "debug") return LogLevel::debug;
  if (s == "info") return LogLevel::info;
  if (s == "warning") return LogLevel::warning;
  if (s == "error") return LogLevel::error;
  if (s == "quiet") return LogLevel::quiet;
  throw ConfigError("--log-level must be one of debug, info, warning, error, quiet");
}

// --config / --spec must be known before the other options are bound so
// that flags override file values.
std::optional<std::string> prescan_config(int argc, char** argv) {
  std::optional<std::string> out;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    for (const char* name : {"--config", "--spec"}) {
      const std::string n = name;
      if (a == n && i + 1 < argc) out = argv[i + 1];
      else if (a.rfind(n + "=", 0) == 0) out = a.substr(n.size() + 1);
    }
  }
  return out;
}

struct Strings {
  std::string start, end, tau_range;
};

void add_transect(CLI::App* s, PipelineConfig& c, Strings& st) {
  s->add_option("--quantities", c.quantities, "Quantity names, conditioning quantity first");
  s->add_option("--transect-start", st.start, "Transect start as lat,lon (degrees)");
  s->add_option("--transect-end", st.end, "Transect end as lat,lon (degrees)");
  s->add_option("--n-locations", c.transect.n_locations, "Registration locations including the conditioning site");
}

void add_model(CLI::App* s, PipelineConfig& c) {
  s->add_option("--n-nod", c.model.n_nod, "Piecewise-linear nodes per profile");
  s->add_option("--u-quantile", c.model.u_quantile, "Conditioning threshold quantile on the Laplace scale");
  s->add_option("--rho-unit-km", c.model.rho_unit_km, "Kilometres per unit of scaled rho");
  s->add_option("--kappa-unit", c.model.kappa_unit, "Multiplier of scaled kappa");
}

void add_synth(CLI::App* s, PipelineConfig& c) {
  s->add_option("--n-events", c.synth.n_events, "Number of synthetic events");
  s->add_option("--synth-tau", c.synth.tau, "Non-exceedance probability of the bin thresholds");
  s->add_option("--xi", c.synth.xi, "GP shape of the synthetic tails");
  s->add_option("--corr-range-km", c.synth.corr_range_km, "Spatial range of the latent field");
  s->add_option("--cross-corr", c.synth.cross_corr, "Correlation between adjacent quantities");
}

void require_files(const std::vector<path>& files) {
  for (const auto& f : files)
    if (!pipeline::fs::exists(f)) throw InputError("input file not found: " + f.string());
}

void emit(const pipeline::StageResult& r, const path& manifest) {
  pipeline::write_manifest(r, manifest);
  for (const auto& o : r.outputs) log_info("wrote " + o.string());
}

path manifest_for(const path& out) { return path(out.string() + ".manifest.json"); }

int report(const std::string& code, const std::string& message, int status) {
  std::cerr << "error[" << code << "]: " << message << '\n';
  return status;
}

}  // namespace

int run_command(int argc, char** argv) {
  try {
    PipelineConfig c = pipeline::default_config();
    const std::optional<std::string> config_path = prescan_config(argc, argv);
    if (config_path) c = pipeline::load_config(*config_path);

    CLI::App app{"Multivariate spatial conditional extremes pipeline", "msce"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_file = config_path.value_or("");
    std::string log_level = "warning";
    Strings st{pair_text(c.transect.start_lat, c.transect.start_lon), pair_text(c.transect.end_lat, c.transect.end_lon),
               pair_text(c.margins.tau_lo, c.margins.tau_hi)};
    app.add_option("--config", config_file, "JSON configuration document; flags override its values");
    app.add_option("--seed", c.seed, "Master seed");
    app.add_option("--threads", c.threads, "Worker cap, 0 for MSCE_THREADS or machine parallelism");
    app.add_option("--log-level", log_level, "debug, info, warning, error or quiet");

    // register
    std::vector<std::string> tracks;
    std::string out, registered, margins, laplace, chain, params_out, rate_file, out_dir, workdir = c.workdir;
    auto* reg = app.add_subcommand("register", "Register track passes on to the transect");
    reg->add_option("--tracks", tracks, "Track CSV per quantity, conditioning quantity first")->required();
    reg->add_option("--out", out, "Registered dataset CSV")->required();
    add_transect(reg, c, st);
    reg->add_option("--max-dist-km", c.registration.max_dist_km, "Largest accepted matching distance");
    reg->add_option("--time-window-hours", c.registration.time_window_hours,
                    "Time tolerance for secondary quantities");

    auto* fm = app.add_subcommand("fit-margins", "Fit penalised piecewise-constant GP margins");
    fm->add_option("--registered", registered, "Registered dataset CSV")->required();
    fm->add_option("--out", out, "Margins JSON")->required();
    add_transect(fm, c, st);
    fm->add_option("--tau", c.margins.tau, "Threshold non-exceedance probability");
    fm->add_option("--tau-range", st.tau_range, "Bootstrap threshold probability range lo,hi");
    fm->add_option("--lambda-grid", c.margins.lambda_grid, "Penalty candidates (default: 10 log-spaced in [1e-2, 1e3])");
    fm->add_option("--folds", c.margins.folds, "Cross-validation folds");
    fm->add_option("--n-boot", c.margins.n_boot, "Bootstrap replicates, 0 for a single fit");
    fm->add_option("--min-exceedances", c.margins.min_exceedances, "Exceedances required per bin");
    fm->add_flag("--merge-sparse-bins,!--no-merge-sparse-bins", c.margins.merge_sparse_bins,
                 "Merge sparse bins instead of failing");

    auto* tf = app.add_subcommand("transform", "Transform a registered dataset to standard Laplace margins");
    tf->add_option("--registered", registered, "Registered dataset CSV")->required();
    tf->add_option("--margins", margins, "Margins JSON")->required();
    tf->add_option("--out", out, "Laplace-scale CSV")->required();
    add_transect(tf, c, st);

    auto* inv = app.add_subcommand("invert", "Map Laplace-scale values back to physical scale");
    inv->add_option("--laplace", laplace, "Laplace-scale CSV in the registered schema")->required();
    inv->add_option("--margins", margins, "Margins JSON")->required();
    inv->add_option("--out", out, "Physical-scale CSV")->required();
    add_transect(inv, c, st);

    auto* rl = app.add_subcommand("return-levels", "Simulate return levels from a fitted margin");
    rl->add_option("--margins", margins, "Margins JSON")->required();
    rl->add_option("--rate-file", rate_file, "CSV with columns bin,rate (events per year)")->required();
    rl->add_option("--out", out, "Return-level CSV")->required();
    add_transect(rl, c, st);
    rl->add_option("--years", c.return_levels.years, "Return period in years");
    rl->add_option("--quantity", c.return_levels.quantity, "Quantity index, 1-based");
    rl->add_option("--location", c.return_levels.location, "Location index, 0-based");
    rl->add_option("--n-sims", c.return_levels.n_sims, "Simulated periods");

    auto* fit = app.add_subcommand("fit-msce", "Fit the dependence model by adaptive MCMC");
    fit->add_option("--laplace", laplace, "Laplace-scale CSV (registered or conditioned schema)")->required();
    fit->add_option("--out", out, "Chain JSON")->required();
    fit->add_option("--params-out", params_out, "Posterior summary JSON (default: <out dir>/params.json)");
    add_transect(fit, c, st);
    add_model(fit, c);
    fit->add_option("--n1", c.chain.mcmc.n1, "Gibbs warm-up iterations");
    fit->add_option("--n2", c.chain.mcmc.n2, "Adaptive iterations");
    fit->add_option("--n-random-search", c.chain.mcmc.n_random_search, "Random-search draws for the start");
    fit->add_option("--epsilon", c.chain.mcmc.epsilon, "Weight of the fixed proposal component");
    fit->add_option("--burn-in", c.chain.mcmc.burn_in, "Discarded fraction of the chain");
    fit->add_option("--thin", c.chain.thin, "Thinning factor of the stored samples");
    fit->add_option("--chains", c.chain.chains, "Independent chains");

    auto* sim = app.add_subcommand("simulate", "Simulate conditioned variates from the posterior");
    sim->add_option("--chain", chain, "Chain JSON")->required();
    sim->add_option("--out", out, "Simulation CSV")->required();
    sim->add_option("--x-quantile", c.simulate.x_quantile, "Non-exceedance probability of the conditioning value");
    sim->add_option("--n-sims", c.simulate.n_sims, "Number of simulations");

    auto* dg = app.add_subcommand("diagnose", "Profiles, quantile validation and KL tests");
    dg->add_option("--laplace", laplace, "Laplace-scale CSV")->required();
    dg->add_option("--chain", chain, "Chain JSON")->required();
    dg->add_option("--out-dir", out_dir, "Output directory")->required();
    dg->add_option("--x-quantile", c.diagnose.x_quantile, "Conditioning quantile for validation and KL tests");
    dg->add_option("--profile-x-quantile", c.diagnose.profile_x_quantile, "Conditioning quantile for profiles");
    dg->add_option("--n-sims", c.diagnose.n_sims, "Simulations per posterior draw");
    dg->add_option("--n-boot", c.diagnose.n_boot, "KL bootstrap replicates");
    dg->add_option("--n-bins", c.diagnose.n_bins, "Histogram bins of the KL estimate");
    dg->add_option("--grid-points", c.diagnose.grid_points, "Distances in the profile grid");

    auto* sy = app.add_subcommand("synth", "Generate synthetic data");
    sy->require_subcommand(1);
    auto* syc = sy->add_subcommand("conditioned", "Conditioned Laplace-scale events from known parameters");
    auto* syp = sy->add_subcommand("physical", "Physical-scale registered dataset");
    auto* syt = sy->add_subcommand("tracks", "Track files whose registration recovers the physical dataset");
    for (auto* s : {syc, syp, syt}) {
      s->add_option("--spec", config_file, "JSON document: configuration with an optional synth.truth block");
      add_transect(s, c, st);
      add_synth(s, c);
    }
    add_model(syc, c);
    syc->add_option("--synth-u-quantile", c.synth.u_quantile, "Conditioning threshold quantile");
    syc->add_option("--out", out, "Conditioned CSV")->required();
    syp->add_option("--out", out, "Registered dataset CSV")->required();
    syt->add_option("--out-dir", out_dir, "Directory for q{k}.csv")->required();
    syt->add_option("--far-passes", c.synth.far_passes, "Passes placed beyond the matching distance");
    syt->add_option("--jitter-km", c.synth.jitter_km, "Positional jitter of track points");

    auto* pl = app.add_subcommand("pipeline", "Run every stage under one work directory");
    pl->add_option("--workdir", workdir, "Work directory");
    pl->add_option("--tracks", c.tracks, "Track CSVs; synthetic tracks are generated when absent");
    add_transect(pl, c, st);
    add_model(pl, c);

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);
      return report("USAGE", e.what(), static_cast<int>(ErrorKind::config));
    }

    set_log_level(parse_level(log_level));
    parse_pair(st.start, "--transect-start", c.transect.start_lat, c.transect.start_lon);
    parse_pair(st.end, "--transect-end", c.transect.end_lat, c.transect.end_lon);
    parse_pair(st.tau_range, "--tau-range", c.margins.tau_lo, c.margins.tau_hi);
    c.validate();
    set_thread_limit(c.threads);

    if (reg->parsed()) {
      std::vector<path> files(tracks.begin(), tracks.end());
      require_files(files);
      emit(pipeline::register_tracks(c, files, out), manifest_for(out));
    } else if (fm->parsed()) {
      require_files({registered});
      emit(pipeline::fit_margins(c, registered, out), manifest_for(out));
    } else if (tf->parsed()) {
      require_files({registered, margins});
      emit(pipeline::transform(c, registered, margins, out), manifest_for(out));
    } else if (inv->parsed()) {
      require_files({laplace, margins});
      emit(pipeline::invert(c, laplace, margins, out), manifest_for(out));
    } else if (rl->parsed()) {
      require_files({margins, rate_file});
      emit(pipeline::return_levels(c, margins, rate_file, out), manifest_for(out));
    } else if (fit->parsed()) {
      require_files({laplace});
      const path p = params_out.empty() ? path(out).parent_path() / "params.json" : path(params_out);
      emit(pipeline::fit_msce(c, laplace, out, p), manifest_for(out));
    } else if (sim->parsed()) {
      require_files({chain});
      emit(pipeline::simulate(c, chain, out), manifest_for(out));
    } else if (dg->parsed()) {
      require_files({laplace, chain});
      pipeline::fs::create_directories(out_dir);
      emit(pipeline::diagnose(c, laplace, chain, out_dir), path(out_dir) / "manifest.json");
    } else if (syc->parsed()) {
      emit(pipeline::synth_conditioned(c, out), manifest_for(out));
    } else if (syp->parsed()) {
      emit(pipeline::synth_physical(c, out), manifest_for(out));
    } else if (syt->parsed()) {
      pipeline::fs::create_directories(out_dir);
      emit(pipeline::synth_tracks(c, out_dir), path(out_dir) / "manifest.json");
    } else if (pl->parsed()) {
      std::vector<path> files(c.tracks.begin(), c.tracks.end());
      require_files(files);
      pipeline::run_pipeline(c, workdir);
    }
    return 0;
  } catch (const Error& e) {
    return report(e.code(), e.what(), static_cast<int>(e.kind()));
  } catch (const std::invalid_argument& e) {
    return report("INPUT", e.what(), static_cast<int>(ErrorKind::input));
  } catch (const std::domain_error& e) {
    return report("INPUT", e.what(), static_cast<int>(ErrorKind::input));
  } catch (const std::out_of_range& e) {
    return report("INPUT", e.what(), static_cast<int>(ErrorKind::input));
  } catch (const std::filesystem::filesystem_error& e) {
    return report("IO", e.what(), static_cast<int>(ErrorKind::input));
  } catch (const std::exception& e) {
    return report("INTERNAL", e.what(), static_cast<int>(ErrorKind::computation));
  }
}

}  // namespace msce::cli
