#pragma once

#include "matl/adam.hpp"
#include "matl/envs.hpp"
#include "matl/networks.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace matl {

struct PpoConfig {
  double clip_epsilon = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  int epochs_per_batch = 4;
  int minibatch_size = 32;  // timesteps; each carries one sample per agent
  double learning_rate = 3e-4;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  int episodes_per_batch = 8;
  int total_epochs = 100;
  bool normalize_advantages = true;
};

void validate(const PpoConfig& config);

// Timestep-major storage: sample (t, i) lives at index t * n_agents + i.
struct RolloutBuffer {
  Index n_agents = 0;
  Index obs_dim = 0;
  std::vector<double> observations;  // [T * n * obs_dim]
  std::vector<int> actions;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<std::uint8_t> dones;  // trajectory of agent i ends after step t
  std::vector<std::uint8_t> mask;   // agent i was acting at step t
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<Index> episode_starts;
  std::vector<double> episode_returns;  // team reward summed over agents and steps
  std::vector<std::uint8_t> episode_success;

  RolloutBuffer() = default;
  RolloutBuffer(Index agents, Index obs_width) : n_agents(agents), obs_dim(obs_width) {}

  Index timesteps() const { return n_agents ? static_cast<Index>(actions.size()) / n_agents : 0; }
  Index samples() const { return static_cast<Index>(actions.size()); }
  bool has_advantages() const { return advantages.size() == actions.size() && !actions.empty(); }

  void begin_episode();
  void add_step(const Tensor& obs, std::span<const int> acts, std::span<const double> logp,
                std::span<const double> rews, std::span<const double> vals,
                std::span<const std::uint8_t> done_flags, std::span<const std::uint8_t> acting);
  void end_episode(double team_return, bool success);
  Tensor observations_at(Index t) const;
};

RolloutBuffer collect_rollouts(const ActorParams& actor, const CriticParams& critic, const EnvConfig& env_config,
                               int episodes, Rng& rng);

// Single trajectory: delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t and
// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}. `bootstrap` stands in for
// V_T after the last step.
std::vector<double> gae(std::span<const double> rewards, std::span<const double> values,
                        std::span<const std::uint8_t> dones, double bootstrap, double gamma, double lambda);

// Fills advantages and returns (= advantages + values) per agent and episode.
// Advantages are stored unnormalized; ppo_update normalizes per batch.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);

struct TrainReport {
  int epoch = 0;
  double mean_episode_return = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

// Minibatch rows for the loss; every vector has one entry per logits row.
struct LossBatch {
  std::vector<int> actions;
  std::vector<double> old_log_probs;
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> weights;  // 1 for acting samples, 0 otherwise
};

struct LossTerms {
  Var total;
  Var policy;   // -mean(min(rho A, clip(rho) A))
  Var value;    // mean((V - R)^2)
  Var entropy;  // mean policy entropy
  double clip_fraction = 0.0;
};

LossTerms ppo_loss(Var logits, Var values, const LossBatch& batch, const PpoConfig& config);

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

TrainReport ppo_update(ActorParams& actor, CriticParams& critic, Adam& optimizer, const RolloutBuffer& buffer,
                       const PpoConfig& config, Rng& rng);

struct TrainSetup {
  EnvConfig env;
  PpoConfig ppo;
  NetworkConfig network;
  std::uint64_t seed = 1;
};

struct TrainResult {
  ActorParams actor;
  CriticParams critic;
  std::vector<TrainReport> reports;
};

// Full run: per epoch anneal the junction add rate, collect, estimate
// advantages, update. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const TrainSetup& setup, const std::function<void(const TrainReport&)>& on_report = {});

struct EpisodeRecord {
  int episode = 0;
  std::uint64_t seed = 0;
  double total_reward = 0.0;
  bool success = false;
  int steps = 0;
};

struct EvalResult {
  double mean_total_reward = 0.0;
  double success_rate = 0.0;
  std::vector<EpisodeRecord> episodes;
};

int greedy_action(std::span<const double> probabilities);

EvalResult evaluate_greedy(const ActorParams& actor, const EnvConfig& env_config, int n_episodes, std::uint64_t seed);

// Same protocol with uniformly random actions; the baseline for smoke checks.
EvalResult evaluate_uniform(const EnvConfig& env_config, int n_episodes, std::uint64_t seed);

}  // namespace matl
