#include "matl/envs.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace matl {

std::string to_string(EnvKind kind) {
  return kind == EnvKind::kPredatorPrey ? "predator_prey" : "traffic_junction";
}

EnvKind parse_env_kind(const std::string& name) {
  if (name == "predator_prey") return EnvKind::kPredatorPrey;
  if (name == "traffic_junction") return EnvKind::kTrafficJunction;
  throw ConfigError("unknown environment '" + name + "' (expected predator_prey or traffic_junction)");
}

EnvConfig default_env_config(EnvKind kind) {
  EnvConfig c;
  c.kind = kind;
  if (kind == EnvKind::kTrafficJunction) {
    c.n_agents = 3;
    c.grid_dim = 18;
    c.episode_length = 80;
    c.vision = 1;
  }
  return c;
}

int env_capacity(const EnvConfig& config) {
  if (config.kind == EnvKind::kPredatorPrey) return config.grid_dim * config.grid_dim / 5;
  return 20;
}

void validate(const EnvConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (c.n_agents < 1) fail("agent count must be positive");
  if (c.grid_dim < 1) fail("grid_dim must be positive");
  if (c.episode_length < 1) fail("episode_length must be positive");
  if (c.vision < 0) fail("vision must be non-negative");
  const int cap = env_capacity(c);
  if (c.n_agents > cap)
    fail(std::to_string(c.n_agents) + " agents exceed the capacity of " + std::to_string(cap) + " for " +
         to_string(c.kind) + " on a " + std::to_string(c.grid_dim) + "x" + std::to_string(c.grid_dim) + " grid");
  if (c.kind == EnvKind::kPredatorPrey) {
    if (c.prey_count < 0) fail("prey_count must be non-negative");
    if (c.effective_prey_count() > cap)
      fail(std::to_string(c.effective_prey_count()) + " prey exceed the capacity of " + std::to_string(cap));
    if (c.prey_flee_prob < 0.0 || c.prey_flee_prob > 1.0) fail("prey_flee_prob must lie in [0, 1]");
  } else {
    if (c.grid_dim < 4) fail("traffic junction needs grid_dim >= 4");
    for (double p : {c.add_rate, c.add_rate_min, c.add_rate_max})
      if (p < 0.0 || p > 1.0) fail("add rates must lie in [0, 1]");
  }
}

double annealed_add_rate(const EnvConfig& c, int epoch, int total_epochs) {
  if (total_epochs <= 1) return c.add_rate_min;
  const double frac = std::clamp(static_cast<double>(epoch) / (total_epochs - 1), 0.0, 1.0);
  return c.add_rate_max + (c.add_rate_min - c.add_rate_max) * frac;
}

Environment::Environment(EnvConfig config) : config_(std::move(config)) { validate(config_); }

void Environment::check_actions(std::span<const int> actions) const {
  if (static_cast<int>(actions.size()) != config_.n_agents)
    throw UnknownAction("expected " + std::to_string(config_.n_agents) + " actions, got " +
                        std::to_string(actions.size()));
  const int n = action_count();
  for (int a : actions)
    if (a < 0 || a >= n)
      throw UnknownAction("action index " + std::to_string(a) + " outside [0, " + std::to_string(n) + ")");
}

std::unique_ptr<Environment> make_environment(const EnvConfig& config) {
  if (config.kind == EnvKind::kPredatorPrey) return std::make_unique<PredatorPrey>(config);
  return std::make_unique<TrafficJunction>(config);
}

Index observation_dim(const EnvConfig& config) {
  if (config.kind == EnvKind::kPredatorPrey) return PredatorPrey::obs_dim_for(config.vision);
  return TrafficJunction::obs_dim_for(JunctionLayout(config.grid_dim), config.vision);
}

int action_count(EnvKind kind) { return kind == EnvKind::kPredatorPrey ? 5 : 2; }

std::string trace_record(int step, const Environment& env, std::span<const int> actions,
                         const StepResult& result) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["positions"] = nlohmann::json::parse(env.positions_json());
  j["actions"] = std::vector<int>(actions.begin(), actions.end());
  j["rewards"] = result.rewards;
  j["done"] = result.done;
  return j.dump();
}

namespace {

// Sample k distinct cells of a dim x dim grid (partial Fisher-Yates).
std::vector<Cell> distinct_cells(int dim, int k, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(dim * dim));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::vector<Cell> out;
  for (int i = 0; i < k; ++i) {
    const int j = i + uniform_int(rng, static_cast<int>(idx.size()) - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    out.push_back({idx[static_cast<std::size_t>(i)] / dim, idx[static_cast<std::size_t>(i)] % dim});
  }
  return out;
}

constexpr std::array<std::array<int, 2>, 5> kMoves{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {0, 0}}};

double normalized(int v, int dim) { return dim > 1 ? static_cast<double>(v) / (dim - 1) : 0.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Predator-prey

PredatorPrey::PredatorPrey(EnvConfig config) : Environment(std::move(config)) {
  if (config_.kind != EnvKind::kPredatorPrey) throw ConfigError("PredatorPrey needs a predator_prey config");
  if (config_.n_agents + config_.effective_prey_count() > config_.grid_dim * config_.grid_dim)
    throw ConfigError("not enough cells to place every predator and prey");
}

bool PredatorPrey::inside(int row, int col) const {
  return row >= 0 && col >= 0 && row < config_.grid_dim && col < config_.grid_dim;
}

Cell PredatorPrey::apply_move(Cell c, int action) const {
  const int r = c.row + kMoves[static_cast<std::size_t>(action)][0];
  const int k = c.col + kMoves[static_cast<std::size_t>(action)][1];
  return inside(r, k) ? Cell{r, k} : c;
}

Tensor PredatorPrey::reset(std::uint64_t seed) {
  state_ = PredatorPreyState{};
  state_.rng.seed(seed);
  const int n = config_.n_agents;
  const auto cells = distinct_cells(config_.grid_dim, n + config_.effective_prey_count(), state_.rng);
  state_.predators.assign(cells.begin(), cells.begin() + n);
  for (auto it = cells.begin() + n; it != cells.end(); ++it) state_.prey.push_back({*it, true});
  return observe();
}

void PredatorPrey::set_state(PredatorPreyState state) {
  if (static_cast<int>(state.predators.size()) != config_.n_agents)
    throw UsageError("predator count does not match the configured agent count");
  for (const Cell& c : state.predators)
    if (!inside(c.row, c.col)) throw UsageError("predator outside the grid");
  for (const Prey& p : state.prey)
    if (!inside(p.cell.row, p.cell.col)) throw UsageError("prey outside the grid");
  state_ = std::move(state);
}

StepResult PredatorPrey::step(std::span<const int> actions) {
  check_actions(actions);
  const int n = config_.n_agents;
  const std::vector<Cell> before = state_.predators;

  for (int i = 0; i < n; ++i)
    state_.predators[static_cast<std::size_t>(i)] = apply_move(before[static_cast<std::size_t>(i)], actions[static_cast<std::size_t>(i)]);

  // Captures resolve against the pre-step prey positions; survivors then
  // flee using the pre-step predator snapshot.
  StepResult result;
  result.rewards.assign(static_cast<std::size_t>(n), config_.step_reward);
  for (Prey& prey : state_.prey) {
    if (!prey.alive) continue;
    std::vector<int> here;
    for (int i = 0; i < n; ++i)
      if (state_.predators[static_cast<std::size_t>(i)] == prey.cell) here.push_back(i);
    if (here.size() >= 2) {
      prey.alive = false;
      ++result.info.captures;
      result.info.capture_participants += static_cast<int>(here.size());
      for (int i : here) result.rewards[static_cast<std::size_t>(i)] += config_.capture_reward;
    } else if (here.size() == 1) {
      ++result.info.lone_attempts;
      result.rewards[static_cast<std::size_t>(here.front())] += config_.lone_penalty;
    }
  }

  for (Prey& prey : state_.prey) {
    if (!prey.alive) continue;
    std::vector<int> legal;
    for (int a = 0; a < 5; ++a) {
      const Cell c = apply_move(prey.cell, a);
      if (a == kStay || !(c == prey.cell)) legal.push_back(a);
    }
    int choice;
    if (uniform01(state_.rng) < config_.prey_flee_prob) {
      int best = -1;
      std::vector<int> ties;
      for (int a : legal) {
        const Cell c = apply_move(prey.cell, a);
        int nearest = std::numeric_limits<int>::max();
        for (const Cell& p : before) nearest = std::min(nearest, std::abs(p.row - c.row) + std::abs(p.col - c.col));
        if (nearest > best) {
          best = nearest;
          ties.assign(1, a);
        } else if (nearest == best) {
          ties.push_back(a);
        }
      }
      choice = ties[static_cast<std::size_t>(uniform_int(state_.rng, static_cast<int>(ties.size())))];
    } else {
      choice = legal[static_cast<std::size_t>(uniform_int(state_.rng, static_cast<int>(legal.size())))];
    }
    prey.cell = apply_move(prey.cell, choice);
  }

  ++state_.step_index;
  const bool all_captured =
      std::none_of(state_.prey.begin(), state_.prey.end(), [](const Prey& p) { return p.alive; });
  result.done = all_captured || state_.step_index >= config_.episode_length;
  result.info.success = all_captured;
  result.agent_done.assign(static_cast<std::size_t>(n), result.done ? 1 : 0);
  result.observations = observe();
  return result;
}

Index PredatorPrey::obs_dim() const { return obs_dim_for(config_.vision); }

Tensor PredatorPrey::observe() const {
  const int n = config_.n_agents;
  const int v = config_.vision;
  const int w = 2 * v + 1;
  const int plane = w * w;
  Tensor obs({n, obs_dim()});
  for (int i = 0; i < n; ++i) {
    const Cell self = state_.predators[static_cast<std::size_t>(i)];
    double* row = obs.data().data() + static_cast<std::ptrdiff_t>(i) * obs_dim();
    auto slot = [&](const Cell& c) -> int {
      const int dr = c.row - self.row + v;
      const int dc = c.col - self.col + v;
      if (dr < 0 || dc < 0 || dr >= w || dc >= w) return -1;
      return dr * w + dc;
    };
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      if (int s = slot(state_.predators[static_cast<std::size_t>(j)]); s >= 0) row[s] += 1.0;
    }
    for (const Prey& p : state_.prey)
      if (p.alive)
        if (int s = slot(p.cell); s >= 0) row[plane + s] += 1.0;
    for (int dr = 0; dr < w; ++dr)
      for (int dc = 0; dc < w; ++dc)
        if (!inside(self.row + dr - v, self.col + dc - v)) row[2 * plane + dr * w + dc] = 1.0;
    row[3 * plane] = normalized(self.row, config_.grid_dim);
    row[3 * plane + 1] = normalized(self.col, config_.grid_dim);
  }
  return obs;
}

std::vector<std::uint8_t> PredatorPrey::active_agents() const {
  return std::vector<std::uint8_t>(static_cast<std::size_t>(config_.n_agents), 1);
}

std::string PredatorPrey::positions_json() const {
  nlohmann::ordered_json j;
  j["predators"] = nlohmann::json::array();
  for (const Cell& c : state_.predators) j["predators"].push_back({c.row, c.col});
  j["prey"] = nlohmann::json::array();
  for (const Prey& p : state_.prey) j["prey"].push_back({p.cell.row, p.cell.col, p.alive});
  return j.dump();
}

// ---------------------------------------------------------------------------
// Traffic junction

namespace {

enum Heading { kEast, kSouth, kWest, kNorth };

constexpr std::array<std::array<int, 2>, 4> kHeadingStep{{{0, 1}, {1, 0}, {0, -1}, {-1, 0}}};

Heading right_of(Heading h) { return static_cast<Heading>((h + 1) % 4); }
Heading left_of(Heading h) { return static_cast<Heading>((h + 3) % 4); }

// Row (east/west) or column (north/south) occupied by the lane of heading h
// on the road whose first line is p.
int lane_line(Heading h, int p) {
  switch (h) {
    case kEast: return p + 1;
    case kWest: return p;
    case kSouth: return p;
    case kNorth: return p + 1;
  }
  return p;
}

bool horizontal(Heading h) { return h == kEast || h == kWest; }

}  // namespace

JunctionLayout::JunctionLayout(int grid_dim) : grid_dim_(grid_dim) {
  if (grid_dim < 4) throw ConfigError("traffic junction needs grid_dim >= 4");
  const int d = grid_dim;
  if (d >= 12)
    road_lines_ = {d / 3 - 1, 2 * d / 3 - 1};
  else
    road_lines_ = {d / 2 - 1};

  struct Lane {
    Heading heading;
    int line;
  };
  std::vector<Lane> lanes;
  for (int p : road_lines_) {
    lanes.push_back({kEast, lane_line(kEast, p)});
    lanes.push_back({kWest, lane_line(kWest, p)});
  }
  for (int p : road_lines_) {
    lanes.push_back({kSouth, lane_line(kSouth, p)});
    lanes.push_back({kNorth, lane_line(kNorth, p)});
  }

  auto trace = [&](Cell start, Heading h, const Cell* turn_at, Heading turn_to) {
    std::vector<Cell> cells;
    Cell pos = start;
    bool turned = false;
    while (pos.row >= 0 && pos.col >= 0 && pos.row < d && pos.col < d) {
      cells.push_back(pos);
      if (!turned && turn_at && pos == *turn_at) {
        h = turn_to;
        turned = true;
      }
      pos.row += kHeadingStep[h][0];
      pos.col += kHeadingStep[h][1];
    }
    return cells;
  };

  by_entry_.resize(lanes.size());
  for (std::size_t e = 0; e < lanes.size(); ++e) {
    const Lane& lane = lanes[e];
    Cell start;
    switch (lane.heading) {
      case kEast: start = {lane.line, 0}; break;
      case kWest: start = {lane.line, d - 1}; break;
      case kSouth: start = {0, lane.line}; break;
      case kNorth: start = {d - 1, lane.line}; break;
    }
    entries_.push_back(start);
    auto add = [&](std::vector<Cell> cells) {
      by_entry_[e].push_back(static_cast<int>(routes_.size()));
      routes_.push_back(Route{static_cast<int>(e), std::move(cells)});
    };
    add(trace(start, lane.heading, nullptr, lane.heading));

    std::vector<int> crossed = road_lines_;
    if (lane.heading == kWest || lane.heading == kNorth) std::reverse(crossed.begin(), crossed.end());
    for (int q : crossed) {
      for (Heading turn : {right_of(lane.heading), left_of(lane.heading)}) {
        const int other = lane_line(turn, q);
        const Cell at = horizontal(lane.heading) ? Cell{lane.line, other} : Cell{other, lane.line};
        add(trace(start, lane.heading, &at, turn));
      }
    }
  }
}

bool JunctionLayout::on_road(Cell c) const {
  for (int p : road_lines_)
    if (c.row == p || c.row == p + 1 || c.col == p || c.col == p + 1) return true;
  return false;
}

TrafficJunction::TrafficJunction(EnvConfig config)
    : Environment(std::move(config)), layout_(config_.grid_dim) {
  if (config_.kind != EnvKind::kTrafficJunction)
    throw ConfigError("TrafficJunction needs a traffic_junction config");
}

Index TrafficJunction::obs_dim_for(const JunctionLayout& layout, int vision) {
  const Index w = 2 * vision + 1;
  return 2 + static_cast<Index>(layout.routes().size()) + w * w + 1;
}

Index TrafficJunction::obs_dim() const { return obs_dim_for(layout_, config_.vision); }

Cell TrafficJunction::car_cell(const Car& car) const {
  return layout_.routes()[static_cast<std::size_t>(car.route)].cells[static_cast<std::size_t>(car.position)];
}

Tensor TrafficJunction::reset(std::uint64_t seed) {
  state_ = TrafficJunctionState{};
  state_.rng.seed(seed);
  state_.cars.assign(static_cast<std::size_t>(config_.n_agents), Car{});
  state_.add_rate = config_.add_rate;
  return observe();
}

void TrafficJunction::set_state(TrafficJunctionState state) {
  if (static_cast<int>(state.cars.size()) != config_.n_agents)
    throw UsageError("car slot count does not match the configured agent count");
  for (const Car& car : state.cars) {
    if (!car.active) continue;
    if (car.route < 0 || car.route >= static_cast<int>(layout_.routes().size()))
      throw UsageError("car route out of range");
    const auto& cells = layout_.routes()[static_cast<std::size_t>(car.route)].cells;
    if (car.position < 0 || car.position >= static_cast<int>(cells.size()))
      throw UsageError("car position out of range");
  }
  state_ = std::move(state);
}

StepResult TrafficJunction::step(std::span<const int> actions) {
  check_actions(actions);
  const int n = config_.n_agents;
  StepResult result;
  result.rewards.assign(static_cast<std::size_t>(n), 0.0);
  result.agent_done.assign(static_cast<std::size_t>(n), 0);

  std::vector<std::uint8_t> was_active(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Car& car = state_.cars[static_cast<std::size_t>(i)];
    was_active[static_cast<std::size_t>(i)] = car.active;
    if (!car.active) continue;
    car.tau += 1;
    result.rewards[static_cast<std::size_t>(i)] += config_.time_penalty * car.tau;
    if (actions[static_cast<std::size_t>(i)] == kGas) {
      car.position += 1;
      const auto& cells = layout_.routes()[static_cast<std::size_t>(car.route)].cells;
      if (car.position >= static_cast<int>(cells.size())) {
        car.active = false;
        result.agent_done[static_cast<std::size_t>(i)] = 1;
      }
    }
  }

  // Spawn into slots that were idle before this step, one entry at a time;
  // an entry cell still holding a car is skipped.
  int active = static_cast<int>(std::count_if(state_.cars.begin(), state_.cars.end(),
                                              [](const Car& c) { return c.active; }));
  for (std::size_t e = 0; e < layout_.entries().size(); ++e) {
    const bool fire = uniform01(state_.rng) < state_.add_rate;
    if (!fire || active >= n) continue;
    const Cell entry = layout_.entries()[e];
    const bool occupied = std::any_of(state_.cars.begin(), state_.cars.end(),
                                      [&](const Car& c) { return c.active && car_cell(c) == entry; });
    if (occupied) continue;
    int slot = -1;
    for (int i = 0; i < n; ++i)
      if (!was_active[static_cast<std::size_t>(i)] && !state_.cars[static_cast<std::size_t>(i)].active) {
        slot = i;
        break;
      }
    if (slot < 0) continue;
    const auto& options = layout_.routes_from(static_cast<int>(e));
    Car& car = state_.cars[static_cast<std::size_t>(slot)];
    car = Car{options[static_cast<std::size_t>(uniform_int(state_.rng, static_cast<int>(options.size())))], 0, 0, true};
    ++active;
  }

  for (int i = 0; i < n; ++i) {
    const Car& a = state_.cars[static_cast<std::size_t>(i)];
    if (!a.active) continue;
    bool hit = false;
    bool first_here = true;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const Car& b = state_.cars[static_cast<std::size_t>(j)];
      if (b.active && car_cell(b) == car_cell(a)) {
        hit = true;
        if (j < i) first_here = false;
      }
    }
    if (hit) {
      result.rewards[static_cast<std::size_t>(i)] += config_.collision_reward;
      state_.collision_happened = true;
      if (first_here) ++result.info.collisions;
    }
  }

  ++state_.step_index;
  result.done = state_.step_index >= config_.episode_length;
  result.info.success = !state_.collision_happened;
  if (result.done)
    for (int i = 0; i < n; ++i)
      if (was_active[static_cast<std::size_t>(i)] || state_.cars[static_cast<std::size_t>(i)].active)
        result.agent_done[static_cast<std::size_t>(i)] = 1;
  result.observations = observe();
  return result;
}

Tensor TrafficJunction::observe() const {
  const int n = config_.n_agents;
  const int v = config_.vision;
  const int w = 2 * v + 1;
  const Index routes = static_cast<Index>(layout_.routes().size());
  Tensor obs({n, obs_dim()});
  for (int i = 0; i < n; ++i) {
    const Car& car = state_.cars[static_cast<std::size_t>(i)];
    if (!car.active) continue;
    double* row = obs.data().data() + static_cast<std::ptrdiff_t>(i) * obs_dim();
    const Cell self = car_cell(car);
    row[0] = normalized(self.row, config_.grid_dim);
    row[1] = normalized(self.col, config_.grid_dim);
    row[2 + car.route] = 1.0;
    for (int j = 0; j < n; ++j) {
      const Car& other = state_.cars[static_cast<std::size_t>(j)];
      if (j == i || !other.active) continue;
      const Cell c = car_cell(other);
      const int dr = c.row - self.row + v;
      const int dc = c.col - self.col + v;
      if (dr >= 0 && dc >= 0 && dr < w && dc < w) row[2 + routes + dr * w + dc] += 1.0;
    }
    row[2 + routes + w * w] = 1.0;
  }
  return obs;
}

std::vector<std::uint8_t> TrafficJunction::active_agents() const {
  std::vector<std::uint8_t> out;
  for (const Car& c : state_.cars) out.push_back(c.active ? 1 : 0);
  return out;
}

std::string TrafficJunction::positions_json() const {
  nlohmann::ordered_json j;
  j["cars"] = nlohmann::json::array();
  for (const Car& car : state_.cars) {
    if (car.active) {
      const Cell c = car_cell(car);
      j["cars"].push_back({{"row", c.row}, {"col", c.col}, {"route", car.route}, {"tau", car.tau}});
    } else {
      j["cars"].push_back(nullptr);
    }
  }
  j["collision_happened"] = state_.collision_happened;
  return j.dump();
}

}  // namespace matl
