#pragma once

#include "matl/checkpoint.hpp"
#include "matl/config.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace matl {

// One transfer experiment: train at every count in train_agent_counts (per
// train seed), then evaluate each model at every count in eval_agent_counts.
struct TransferPlan {
  EnvConfig env;
  PpoConfig ppo;
  NetworkConfig network;
  std::vector<int> train_agent_counts;
  std::vector<int> eval_agent_counts;
  std::vector<std::uint64_t> train_seeds{1, 2, 3};
  std::vector<std::uint64_t> eval_seeds{1, 2, 3};
  int episodes_per_eval = 100;
  std::filesystem::path output_dir;
};

TransferPlan make_plan(const RunConfig& config);
void validate(const TransferPlan& plan);

std::filesystem::path checkpoint_path(const TransferPlan& plan, int train_count, std::uint64_t train_seed);

struct CheckpointRecord {
  int train_count = 0;
  std::uint64_t train_seed = 0;
  std::filesystem::path path;
  bool complete = false;
  std::string error;  // set when training failed
};

struct CheckpointIndex {
  std::vector<CheckpointRecord> records;  // plan order: count-major, then seed

  const CheckpointRecord* find(int train_count, std::uint64_t train_seed) const;
  bool all_complete() const;
};

using LogFn = std::function<void(const std::string&)>;

// Metadata stored with every trained model.
Metadata training_metadata(const TrainSetup& setup, int epochs_done);

// Trains every (count, seed) pair without a loadable checkpoint, `jobs`
// runs at a time. A diverged run is recorded in the index and the grid
// continues. Writes checkpoints/index.csv and a per-run CSV log.
CheckpointIndex run_training_grid(const TransferPlan& plan, int jobs = 1, const LogFn& log = {});

struct RunValue {
  int train_count = 0;
  int eval_count = 0;
  std::uint64_t train_seed = 0;
  std::uint64_t eval_seed = 0;
  std::optional<double> value;  // empty when the model failed to train
};

struct MatrixCell {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> runs;
  bool failed = false;
};

// rows = train counts, columns = eval counts.
struct EvalMatrix {
  std::vector<int> train_counts;
  std::vector<int> eval_counts;
  std::vector<std::vector<MatrixCell>> cells;
  std::vector<RunValue> runs;  // long form, train count major

  const MatrixCell& at(int train_count, int eval_count) const;
  bool complete() const;
};

struct CellStats {
  double mean = 0.0;
  double std = 0.0;  // population
};
CellStats cell_stats(std::span<const double> values);

std::uint64_t eval_episode_seed(std::uint64_t eval_seed, int eval_count, int train_count, std::uint64_t train_seed);

// Per-run score: mean total reward (predator-prey) or success rate
// (traffic junction) over the evaluation episodes.
double run_score(const EvalResult& result, EnvKind kind);

// Folds run values into cells in plan order.
EvalMatrix assemble_matrix(const std::vector<int>& train_counts, const std::vector<int>& eval_counts,
                           std::vector<RunValue> runs);

EvalMatrix run_eval_matrix(const TransferPlan& plan, const CheckpointIndex& index, int jobs = 1,
                           const LogFn& log = {});

std::string matrix_csv(const EvalMatrix& matrix);
std::string matrix_long_csv(const EvalMatrix& matrix);
void export_matrix(const EvalMatrix& matrix, const std::filesystem::path& dir);

// Runs `count` independent jobs on at most `jobs` threads.
void run_jobs(std::size_t count, int jobs, const std::function<void(std::size_t)>& job);

}  // namespace matl
