#pragma once

#include "matl/random.hpp"
#include "matl/tensor.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace matl {

enum class EnvKind { kPredatorPrey, kTrafficJunction };

std::string to_string(EnvKind kind);
EnvKind parse_env_kind(const std::string& name);

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct EnvConfig {
  EnvKind kind = EnvKind::kPredatorPrey;
  int n_agents = 2;
  int grid_dim = 20;
  int episode_length = 100;
  std::uint64_t seed = 0;
  int vision = 2;

  // Predator-prey.
  int prey_count = 0;  // 0 means one prey per predator
  double capture_reward = 10.0;
  double step_reward = -0.05;
  double lone_penalty = -0.5;
  double prey_flee_prob = 0.7;

  // Traffic junction.
  double collision_reward = -10.0;
  double time_penalty = -0.01;
  double add_rate_max = 0.05;
  double add_rate_min = 0.02;
  double add_rate = 0.05;  // current spawn probability per entry per step

  int effective_prey_count() const { return prey_count > 0 ? prey_count : n_agents; }
};

// Defaults for each environment: predator-prey 20x20 with vision 2; traffic
// junction "hard" (18x18, two roads each way, vision 1, 80 steps).
EnvConfig default_env_config(EnvKind kind);

int env_capacity(const EnvConfig& config);
void validate(const EnvConfig& config);

// Linear anneal from add_rate_max to add_rate_min across training epochs.
double annealed_add_rate(const EnvConfig& config, int epoch, int total_epochs);

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct StepInfo {
  int captures = 0;              // prey captured this step
  int capture_participants = 0;  // sum over captures of co-located predators
  int lone_attempts = 0;         // live prey cells holding exactly one predator
  int collisions = 0;            // cells holding two or more cars
  bool success = false;          // predator-prey: all prey captured; junction: no collision so far
};

struct StepResult {
  Tensor observations;                    // [n_agents x obs_dim]
  std::vector<double> rewards;            // per agent
  bool done = false;
  StepInfo info;
  std::vector<std::uint8_t> agent_done;   // agent's trajectory ended this step
};

struct UnknownAction : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Environment {
 public:
  explicit Environment(EnvConfig config);
  virtual ~Environment() = default;

  const EnvConfig& config() const { return config_; }
  int n_agents() const { return config_.n_agents; }

  Tensor reset() { return reset(config_.seed); }
  virtual Tensor reset(std::uint64_t seed) = 0;
  virtual StepResult step(std::span<const int> actions) = 0;
  virtual Tensor observe() const = 0;
  virtual Index obs_dim() const = 0;
  virtual int action_count() const = 0;
  virtual std::vector<std::uint8_t> active_agents() const = 0;
  virtual int step_index() const = 0;
  // JSON object describing entity positions, for episode traces.
  virtual std::string positions_json() const = 0;

 protected:
  void check_actions(std::span<const int> actions) const;
  EnvConfig config_;
};

std::unique_ptr<Environment> make_environment(const EnvConfig& config);
Index observation_dim(const EnvConfig& config);
int action_count(EnvKind kind);

// One line-delimited JSON record: step, positions, actions, rewards.
std::string trace_record(int step, const Environment& env, std::span<const int> actions,
                         const StepResult& result);

// ---------------------------------------------------------------------------

enum PredatorAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };

struct Prey {
  Cell cell;
  bool alive = true;
};

struct PredatorPreyState {
  std::vector<Cell> predators;
  std::vector<Prey> prey;
  int step_index = 0;
  Rng rng;
};

class PredatorPrey final : public Environment {
 public:
  explicit PredatorPrey(EnvConfig config);

  using Environment::reset;
  Tensor reset(std::uint64_t seed) override;
  StepResult step(std::span<const int> actions) override;
  Tensor observe() const override;
  Index obs_dim() const override;
  int action_count() const override { return 5; }
  std::vector<std::uint8_t> active_agents() const override;
  int step_index() const override { return state_.step_index; }
  std::string positions_json() const override;

  const PredatorPreyState& state() const { return state_; }
  // Replaces the world state, e.g. to stage a hand-built scenario.
  void set_state(PredatorPreyState state);

  static Index obs_dim_for(int vision) { return 3 * (2 * vision + 1) * (2 * vision + 1) + 2; }

 private:
  Cell apply_move(Cell c, int action) const;
  bool inside(int row, int col) const;

  PredatorPreyState state_;
};

// ---------------------------------------------------------------------------

enum CarAction : int { kGas = 0, kBrake = 1 };

struct Route {
  int entry = 0;  // index of the entry lane the route starts from
  std::vector<Cell> cells;
};

// Two-lane roads crossing the grid; right-hand traffic. Grids of 12 or more
// cells get two roads per direction (four junctions), smaller grids one.
class JunctionLayout {
 public:
  explicit JunctionLayout(int grid_dim);

  int grid_dim() const { return grid_dim_; }
  const std::vector<Route>& routes() const { return routes_; }
  const std::vector<Cell>& entries() const { return entries_; }
  const std::vector<int>& routes_from(int entry) const { return by_entry_[static_cast<std::size_t>(entry)]; }
  bool on_road(Cell c) const;

 private:
  int grid_dim_;
  std::vector<int> road_lines_;
  std::vector<Cell> entries_;
  std::vector<Route> routes_;
  std::vector<std::vector<int>> by_entry_;
};

struct Car {
  int route = 0;
  int position = 0;  // index along the route's cells
  int tau = 0;       // steps spent active
  bool active = false;
};

struct TrafficJunctionState {
  std::vector<Car> cars;  // one slot per agent
  int step_index = 0;
  double add_rate = 0.0;
  bool collision_happened = false;
  Rng rng;
};

class TrafficJunction final : public Environment {
 public:
  explicit TrafficJunction(EnvConfig config);

  using Environment::reset;
  Tensor reset(std::uint64_t seed) override;
  StepResult step(std::span<const int> actions) override;
  Tensor observe() const override;
  Index obs_dim() const override;
  int action_count() const override { return 2; }
  std::vector<std::uint8_t> active_agents() const override;
  int step_index() const override { return state_.step_index; }
  std::string positions_json() const override;

  const TrafficJunctionState& state() const { return state_; }
  void set_state(TrafficJunctionState state);
  const JunctionLayout& layout() const { return layout_; }
  Cell car_cell(const Car& car) const;

  static Index obs_dim_for(const JunctionLayout& layout, int vision);

 private:
  JunctionLayout layout_;
  TrafficJunctionState state_;
};

}  // namespace matl
