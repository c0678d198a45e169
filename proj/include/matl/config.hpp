#pragma once

#include "matl/envs.hpp"
#include "matl/networks.hpp"
#include "matl/ppo.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace matl {

struct PlanConfig {
  std::vector<int> train_agent_counts{2, 5, 10, 20, 50, 80};
  std::vector<int> eval_agent_counts{2, 5, 10, 20, 50, 80};
  std::vector<std::uint64_t> train_seeds{1, 2, 3};
  std::vector<std::uint64_t> eval_seeds{1, 2, 3};
  int episodes_per_eval = 100;
};

struct RunConfig {
  EnvConfig env = default_env_config(EnvKind::kPredatorPrey);
  PpoConfig ppo;
  NetworkConfig network;
  PlanConfig plan;
  std::uint64_t seed = 1;
  std::string out = "runs";
};

// Train/eval counts of the transfer experiments: 2..80 for predator-prey,
// 3..20 for traffic junction.
std::vector<int> default_agent_counts(EnvKind kind);

// Sets one dotted key ("env.grid_dim", "ppo.gamma", ...). Unknown keys and
// unparsable values throw ConfigError naming the key.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

// Parses "key = value" lines grouped under "[section]" headers; '#' starts a
// comment. Keys before any header must be dotted. Changing env.kind resets
// the env section and the plan's agent counts to that kind's defaults.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});

// Every key with its resolved value; parse_config(format_config(c)) == c.
std::string format_config(const RunConfig& config);

// Flat "section.key" -> value pairs of the env and network sections, as
// stored in checkpoint metadata.
std::vector<std::pair<std::string, std::string>> model_settings(const EnvConfig& env, const NetworkConfig& network);

std::string format_double(double value);  // shortest text that parses back exactly

}  // namespace matl
