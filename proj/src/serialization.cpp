#include "msce/serialization.hpp"

#include <cmath>
#include <limits>

#include "msce/error.hpp"

namespace msce::serial {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json array_json(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

std::vector<double> doubles(const json& j, const std::string& key) {
  if (!j.is_array()) throw ConfigError("'" + key + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto& x : j) {
    if (x.is_null())
      out.push_back(kNaN);
    else if (x.is_number())
      out.push_back(x.get<double>());
    else
      throw ConfigError("'" + key + "' must contain only numbers");
  }
  return out;
}

const json& field(const json& j, const std::string& key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError("missing key '" + key + "'");
  return j.at(key);
}

std::vector<std::vector<double>> grid_from(const json& j, const std::string& key, int m, int n_nod) {
  const json& g = field(j, key);
  if (!g.is_array() || static_cast<int>(g.size()) != m) throw ConfigError("'" + key + "' must hold one array per quantity");
  std::vector<std::vector<double>> out;
  for (const auto& row : g) {
    out.push_back(doubles(row, key));
    if (static_cast<int>(out.back().size()) != n_nod) throw ConfigError("'" + key + "' rows must hold n_nod values");
  }
  return out;
}

}  // namespace

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json parse(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": invalid JSON: " + e.what());
  }
}

double number(const json& j, const std::string& key) {
  const json& v = field(j, key);
  if (v.is_null()) return kNaN;
  if (!v.is_number()) throw ConfigError("'" + key + "' must be a number");
  return v.get<double>();
}

json vector_json(const VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

VectorXd vector_from_json(const json& j) {
  const std::vector<double> v = doubles(j, "vector");
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json to_json(const marginal::GPMarginalModel& m) {
  json j;
  j["bin_scheme"] = {{"n_dir_bins", m.scheme.n_dir_bins}, {"n_season_bins", m.scheme.n_season_bins}};
  j["tau"] = m.tau;
  j["xi"] = m.xi;
  j["penalty_lambda"] = m.lambda;
  j["seed"] = m.seed;
  j["objective"] = num(m.objective);
  j["group"] = m.group;
  j["thresholds"] = array_json(m.threshold);
  j["sigma"] = array_json(m.sigma);
  j["exceedances"] = m.exceedances;
  json body = json::array();
  for (const auto& b : m.body) body.push_back(array_json(b));
  j["body"] = body;
  return j;
}

marginal::GPMarginalModel margin_from_json(const json& j) {
  marginal::GPMarginalModel m;
  const json& scheme = field(j, "bin_scheme");
  m.scheme.n_dir_bins = field(scheme, "n_dir_bins").get<int>();
  m.scheme.n_season_bins = field(scheme, "n_season_bins").get<int>();
  m.tau = number(j, "tau");
  m.xi = number(j, "xi");
  m.lambda = number(j, "penalty_lambda");
  m.seed = field(j, "seed").get<std::uint64_t>();
  m.objective = number(j, "objective");
  m.group = field(j, "group").get<std::vector<int>>();
  m.threshold = doubles(field(j, "thresholds"), "thresholds");
  m.sigma = doubles(field(j, "sigma"), "sigma");
  m.exceedances = field(j, "exceedances").get<std::vector<std::size_t>>();
  for (const auto& b : field(j, "body")) m.body.push_back(doubles(b, "body"));
  const std::size_t n = static_cast<std::size_t>(marginal::kBinCount);
  if (m.group.size() != n || m.threshold.size() != n || m.sigma.size() != n || m.body.size() != n ||
      m.exceedances.size() != n)
    throw ConfigError("marginal model must hold 16 bins");
  for (std::size_t b = 0; b < n; ++b)
    if (std::isfinite(m.threshold[b]) && !(m.sigma[b] > 0.0)) throw ConfigError("marginal model has non-positive sigma");
  return m;
}

json to_json(const model::ModelLayout& l) {
  json j;
  j["m"] = l.m;
  j["p"] = l.p;
  j["n_nod"] = l.n_nod;
  j["node_km"] = array_json(l.node_km);
  j["remote_km"] = array_json(l.remote_km);
  j["rho_unit_km"] = l.rho_unit_km;
  j["kappa_unit"] = l.kappa_unit;
  j["u"] = l.u;
  json pw = json::array();
  for (Eigen::Index r = 0; r < l.pairwise_km.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < l.pairwise_km.cols(); ++c) row.push_back(l.pairwise_km(r, c));
    pw.push_back(row);
  }
  j["pairwise_km"] = pw;
  return j;
}

model::ModelLayout layout_from_json(const json& j) {
  model::ModelLayout l;
  l.m = field(j, "m").get<int>();
  l.p = field(j, "p").get<int>();
  l.n_nod = field(j, "n_nod").get<int>();
  l.node_km = doubles(field(j, "node_km"), "node_km");
  l.remote_km = doubles(field(j, "remote_km"), "remote_km");
  l.rho_unit_km = number(j, "rho_unit_km");
  l.kappa_unit = number(j, "kappa_unit");
  l.u = number(j, "u");
  const json& pw = field(j, "pairwise_km");
  const auto n = static_cast<Eigen::Index>(l.p + 1);
  if (static_cast<Eigen::Index>(pw.size()) != n) throw ConfigError("pairwise_km must be (p+1) x (p+1)");
  l.pairwise_km.resize(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = doubles(pw[static_cast<std::size_t>(r)], "pairwise_km");
    if (static_cast<Eigen::Index>(row.size()) != n) throw ConfigError("pairwise_km must be (p+1) x (p+1)");
    for (Eigen::Index c = 0; c < n; ++c) l.pairwise_km(r, c) = row[static_cast<std::size_t>(c)];
  }
  if (static_cast<int>(l.node_km.size()) != l.n_nod || static_cast<int>(l.remote_km.size()) != l.p)
    throw ConfigError("layout node or remote distances have the wrong length");
  return l;
}

json to_json(const model::MSCEParams& p) {
  json j;
  j["m"] = p.m;
  j["n_nod"] = p.n_nod;
  const std::pair<const char*, const std::vector<std::vector<double>>*> blocks[] = {
      {"alpha", &p.alpha}, {"beta", &p.beta}, {"mu", &p.mu}, {"sigma", &p.sigma}, {"delta", &p.delta}};
  for (const auto& [name, grid] : blocks) {
    json g = json::array();
    for (const auto& row : *grid) g.push_back(array_json(row));
    j[name] = g;
  }
  j["lambda"] = array_json(p.lambda);
  j["rho"] = array_json(p.rho);
  j["kappa"] = array_json(p.kappa);
  return j;
}

model::MSCEParams params_from_json(const json& j) {
  const int m = field(j, "m").get<int>();
  const int n_nod = field(j, "n_nod").get<int>();
  if (m < 1 || n_nod < 1) throw ConfigError("parameter block needs m >= 1 and n_nod >= 1");
  model::MSCEParams p = model::MSCEParams::filled(m, n_nod);
  p.alpha = grid_from(j, "alpha", m, n_nod);
  p.beta = grid_from(j, "beta", m, n_nod);
  p.mu = grid_from(j, "mu", m, n_nod);
  p.sigma = grid_from(j, "sigma", m, n_nod);
  p.delta = grid_from(j, "delta", m, n_nod);
  p.lambda = doubles(field(j, "lambda"), "lambda");
  p.rho = doubles(field(j, "rho"), "rho");
  p.kappa = doubles(field(j, "kappa"), "kappa");
  const auto mm = static_cast<std::size_t>(m);
  if (p.lambda.size() != mm * (mm - 1) / 2 || p.rho.size() != mm * (mm + 1) / 2 || p.kappa.size() != mm * (mm + 1) / 2)
    throw ConfigError("lambda must hold m(m-1)/2 values, rho and kappa m(m+1)/2");
  return p;
}

json to_json(const mcmc::MCMCConfig& c) {
  return {{"n1", c.n1},         {"n2", c.n2},           {"n_random_search", c.n_random_search},
          {"epsilon", c.epsilon}, {"burn_in", c.burn_in}, {"refresh_every", c.refresh_every},
          {"seed", c.seed}};
}

mcmc::MCMCConfig mcmc_config_from_json(const json& j, mcmc::MCMCConfig c) {
  if (j.contains("n1")) c.n1 = j.at("n1").get<int>();
  if (j.contains("n2")) c.n2 = j.at("n2").get<int>();
  if (j.contains("n_random_search")) c.n_random_search = j.at("n_random_search").get<int>();
  if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
  if (j.contains("burn_in")) c.burn_in = j.at("burn_in").get<double>();
  if (j.contains("refresh_every")) c.refresh_every = j.at("refresh_every").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace msce::serial
