#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "msce/marginal.hpp"
#include "msce/mcmc.hpp"
#include "msce/model.hpp"

namespace msce::serial {

using json = nlohmann::json;

// Two-space indentation with a trailing newline; NaN is written as null.
std::string dump(const json& j);
json parse(const std::string& text, const std::string& source);

json to_json(const marginal::GPMarginalModel& m);
marginal::GPMarginalModel margin_from_json(const json& j);

json to_json(const model::ModelLayout& layout);
model::ModelLayout layout_from_json(const json& j);

// Named blocks alpha/beta/mu/sigma/delta ([k][node]), lambda/rho/kappa.
json to_json(const model::MSCEParams& p);
model::MSCEParams params_from_json(const json& j);

json to_json(const mcmc::MCMCConfig& c);
mcmc::MCMCConfig mcmc_config_from_json(const json& j, mcmc::MCMCConfig base = {});

json vector_json(const VectorXd& v);
VectorXd vector_from_json(const json& j);

// Reads a number, mapping null to NaN; throws ConfigError naming the key.
double number(const json& j, const std::string& key);

}  // namespace msce::serial
