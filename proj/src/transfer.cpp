#include "matl/transfer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <thread>

namespace matl {

TransferPlan make_plan(const RunConfig& c) {
  TransferPlan p;
  p.env = c.env;
  p.ppo = c.ppo;
  p.network = c.network;
  p.train_agent_counts = c.plan.train_agent_counts;
  p.eval_agent_counts = c.plan.eval_agent_counts;
  p.train_seeds = c.plan.train_seeds;
  p.eval_seeds = c.plan.eval_seeds;
  p.episodes_per_eval = c.plan.episodes_per_eval;
  p.output_dir = c.out;
  return p;
}

void validate(const TransferPlan& p) {
  auto check_counts = [&](const std::vector<int>& counts, const char* name) {
    if (counts.empty()) throw ConfigError(std::string(name) + " must not be empty");
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (i > 0 && counts[i] <= counts[i - 1]) throw ConfigError(std::string(name) + " must be strictly increasing");
      EnvConfig e = p.env;
      e.n_agents = counts[i];
      validate(e);
    }
  };
  check_counts(p.train_agent_counts, "train_agent_counts");
  check_counts(p.eval_agent_counts, "eval_agent_counts");
  if (p.train_seeds.empty() || p.eval_seeds.empty()) throw ConfigError("seed lists must not be empty");
  if (p.episodes_per_eval < 1) throw ConfigError("episodes_per_eval must be positive");
  validate(p.ppo);
}

std::filesystem::path checkpoint_path(const TransferPlan& plan, int train_count, std::uint64_t train_seed) {
  return plan.output_dir / "checkpoints" /
         ("agents" + std::to_string(train_count) + "_seed" + std::to_string(train_seed) + ".ckpt");
}

const CheckpointRecord* CheckpointIndex::find(int train_count, std::uint64_t train_seed) const {
  for (const auto& r : records)
    if (r.train_count == train_count && r.train_seed == train_seed) return &r;
  return nullptr;
}

bool CheckpointIndex::all_complete() const {
  return std::all_of(records.begin(), records.end(), [](const CheckpointRecord& r) { return r.complete; });
}

void run_jobs(std::size_t count, int jobs, const std::function<void(std::size_t)>& job) {
  const std::size_t threads = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(jobs, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

Metadata training_metadata(const TrainSetup& setup, int epochs_done) {
  Metadata m = model_settings(setup.env, setup.network);
  m.emplace_back("train_agents", std::to_string(setup.env.n_agents));
  m.emplace_back("seed", std::to_string(setup.seed));
  m.emplace_back("epoch", std::to_string(epochs_done));
  m.emplace_back("obs_dim", std::to_string(observation_dim(setup.env)));
  m.emplace_back("action_count", std::to_string(action_count(setup.env.kind)));
  return m;
}

namespace {

std::string training_log_csv(const std::vector<TrainReport>& reports) {
  std::string out = "epoch,mean_episode_return,policy_loss,value_loss,entropy,clip_fraction\n";
  for (const TrainReport& r : reports)
    out += std::to_string(r.epoch) + "," + format_double(r.mean_episode_return) + "," + format_double(r.policy_loss) +
           "," + format_double(r.value_loss) + "," + format_double(r.entropy) + "," + format_double(r.clip_fraction) +
           "\n";
  return out;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

bool loadable(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return false;
  try {
    load_checkpoint(path);
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

std::string index_csv(const TransferPlan& plan, const CheckpointIndex& index) {
  std::string out = "train_count,train_seed,checkpoint,status,error\n";
  for (const auto& r : index.records) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out += std::to_string(r.train_count) + "," + std::to_string(r.train_seed) + "," +
           std::filesystem::relative(r.path, plan.output_dir).generic_string() + "," +
           (r.complete ? "complete" : "failed") + "," + err + "\n";
  }
  return out;
}

}  // namespace

CheckpointIndex run_training_grid(const TransferPlan& plan, int jobs, const LogFn& log) {
  validate(plan);
  std::filesystem::create_directories(plan.output_dir / "checkpoints");
  CheckpointIndex index;
  for (int n : plan.train_agent_counts)
    for (std::uint64_t s : plan.train_seeds) index.records.push_back({n, s, checkpoint_path(plan, n, s), false, {}});

  std::mutex log_mutex;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    log(msg);
  };

  run_jobs(index.records.size(), jobs, [&](std::size_t k) {
    CheckpointRecord& rec = index.records[k];
    const std::string cell = "agents=" + std::to_string(rec.train_count) + " seed=" + std::to_string(rec.train_seed);
    if (loadable(rec.path)) {
      rec.complete = true;
      say("skip " + cell + " (checkpoint present)");
      return;
    }
    TrainSetup setup;
    setup.env = plan.env;
    setup.env.n_agents = rec.train_count;
    setup.ppo = plan.ppo;
    setup.network = plan.network;
    setup.seed = rec.train_seed;
    say("train " + cell);
    try {
      TrainResult result = train(setup);
      auto log_path = rec.path;
      log_path.replace_extension(".log.csv");
      write_text_atomic(log_path, training_log_csv(result.reports));
      save_checkpoint(rec.path, make_checkpoint(result.actor, result.critic,
                                                training_metadata(setup, setup.ppo.total_epochs)));
      rec.complete = true;
      say("done " + cell);
    } catch (const TrainingDiverged& e) {
      rec.error = e.what();
      say("FAILED " + cell + ": " + rec.error);
    }
  });

  write_text_atomic(plan.output_dir / "checkpoints" / "index.csv", index_csv(plan, index));
  return index;
}

CellStats cell_stats(std::span<const double> values) {
  CellStats s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

std::uint64_t eval_episode_seed(std::uint64_t eval_seed, int eval_count, int train_count, std::uint64_t train_seed) {
  return derive_seed(eval_seed, {static_cast<std::uint64_t>(eval_count), static_cast<std::uint64_t>(train_count),
                                 train_seed});
}

double run_score(const EvalResult& result, EnvKind kind) {
  return kind == EnvKind::kTrafficJunction ? result.success_rate : result.mean_total_reward;
}

const MatrixCell& EvalMatrix::at(int train_count, int eval_count) const {
  const auto r = std::find(train_counts.begin(), train_counts.end(), train_count);
  const auto c = std::find(eval_counts.begin(), eval_counts.end(), eval_count);
  if (r == train_counts.end() || c == eval_counts.end())
    throw UsageError("no matrix cell for train " + std::to_string(train_count) + ", eval " +
                     std::to_string(eval_count));
  return cells[static_cast<std::size_t>(r - train_counts.begin())][static_cast<std::size_t>(c - eval_counts.begin())];
}

bool EvalMatrix::complete() const {
  for (const auto& row : cells)
    for (const auto& cell : row)
      if (cell.failed) return false;
  return true;
}

EvalMatrix assemble_matrix(const std::vector<int>& train_counts, const std::vector<int>& eval_counts,
                           std::vector<RunValue> runs) {
  EvalMatrix m;
  m.train_counts = train_counts;
  m.eval_counts = eval_counts;
  auto pos = [](const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) - v.begin(); };
  std::stable_sort(runs.begin(), runs.end(), [&](const RunValue& a, const RunValue& b) {
    const auto ka = std::make_pair(pos(train_counts, a.train_count), pos(eval_counts, a.eval_count));
    const auto kb = std::make_pair(pos(train_counts, b.train_count), pos(eval_counts, b.eval_count));
    return ka < kb;
  });
  m.cells.assign(train_counts.size(), std::vector<MatrixCell>(eval_counts.size()));
  for (const RunValue& r : runs) {
    const auto i = static_cast<std::size_t>(pos(train_counts, r.train_count));
    const auto j = static_cast<std::size_t>(pos(eval_counts, r.eval_count));
    if (i >= train_counts.size() || j >= eval_counts.size())
      throw UsageError("run value outside the matrix: train " + std::to_string(r.train_count) + ", eval " +
                       std::to_string(r.eval_count));
    MatrixCell& cell = m.cells[i][j];
    if (r.value)
      cell.runs.push_back(*r.value);
    else
      cell.failed = true;
  }
  for (auto& row : m.cells)
    for (auto& cell : row) {
      if (cell.runs.empty()) cell.failed = true;
      if (cell.failed) continue;
      const CellStats s = cell_stats(cell.runs);
      cell.mean = s.mean;
      cell.std = s.std;
    }
  m.runs = std::move(runs);
  return m;
}

EvalMatrix run_eval_matrix(const TransferPlan& plan, const CheckpointIndex& index, int jobs, const LogFn& log) {
  validate(plan);
  std::vector<RunValue> runs;
  for (int n_train : plan.train_agent_counts)
    for (int n_eval : plan.eval_agent_counts)
      for (std::uint64_t ts : plan.train_seeds)
        for (std::uint64_t es : plan.eval_seeds) runs.push_back({n_train, n_eval, ts, es, std::nullopt});

  // Load every model once, up front; a missing one is fatal.
  std::vector<std::pair<const CheckpointRecord*, std::optional<ActorParams>>> models;
  for (int n_train : plan.train_agent_counts)
    for (std::uint64_t ts : plan.train_seeds) {
      const CheckpointRecord* rec = index.find(n_train, ts);
      if (rec && !rec->complete && !rec->error.empty()) {
        models.emplace_back(rec, std::nullopt);
        continue;
      }
      const auto path = rec ? rec->path : checkpoint_path(plan, n_train, ts);
      if (!std::filesystem::exists(path))
        throw std::runtime_error("missing checkpoint for train count " + std::to_string(n_train) + ", train seed " +
                                 std::to_string(ts) + ": " + path.string());
      models.emplace_back(rec, actor_from_checkpoint(load_checkpoint(path)));
    }
  auto model_for = [&](int n_train, std::uint64_t ts) -> const std::optional<ActorParams>& {
    const auto i = static_cast<std::size_t>(
        std::find(plan.train_agent_counts.begin(), plan.train_agent_counts.end(), n_train) -
        plan.train_agent_counts.begin());
    const auto j = static_cast<std::size_t>(std::find(plan.train_seeds.begin(), plan.train_seeds.end(), ts) -
                                            plan.train_seeds.begin());
    return models[i * plan.train_seeds.size() + j].second;
  };

  std::mutex log_mutex;
  run_jobs(runs.size(), jobs, [&](std::size_t k) {
    RunValue& r = runs[k];
    const auto& actor = model_for(r.train_count, r.train_seed);
    if (!actor) return;
    EnvConfig env = plan.env;
    env.n_agents = r.eval_count;
    env.add_rate = env.add_rate_min;
    const EvalResult res = evaluate_greedy(
        *actor, env, plan.episodes_per_eval, eval_episode_seed(r.eval_seed, r.eval_count, r.train_count, r.train_seed));
    r.value = run_score(res, env.kind);
    if (log) {
      std::lock_guard lock(log_mutex);
      log("eval train=" + std::to_string(r.train_count) + " seed=" + std::to_string(r.train_seed) +
          " eval=" + std::to_string(r.eval_count) + " eval_seed=" + std::to_string(r.eval_seed) + " -> " +
          format_double(*r.value));
    }
  });
  return assemble_matrix(plan.train_agent_counts, plan.eval_agent_counts, std::move(runs));
}

namespace {

std::string two_decimals(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::string matrix_csv(const EvalMatrix& m) {
  std::string out = "train\\eval";
  for (int c : m.eval_counts) out += "," + std::to_string(c);
  out += "\n";
  for (std::size_t i = 0; i < m.train_counts.size(); ++i) {
    out += std::to_string(m.train_counts[i]);
    for (const MatrixCell& cell : m.cells[i])
      out += "," + (cell.failed ? std::string("FAIL") : two_decimals(cell.mean) + "±" + two_decimals(cell.std));
    out += "\n";
  }
  return out;
}

std::string matrix_long_csv(const EvalMatrix& m) {
  std::string out = "train_count,eval_count,train_seed,eval_seed,mean\n";
  for (const RunValue& r : m.runs) {
    char buf[64];
    if (r.value)
      std::snprintf(buf, sizeof(buf), "%.17g", *r.value);
    else
      std::snprintf(buf, sizeof(buf), "FAIL");
    out += std::to_string(r.train_count) + "," + std::to_string(r.eval_count) + "," + std::to_string(r.train_seed) +
           "," + std::to_string(r.eval_seed) + "," + buf + "\n";
  }
  return out;
}

void export_matrix(const EvalMatrix& matrix, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_atomic(dir / "matrix.csv", matrix_csv(matrix));
  write_text_atomic(dir / "matrix_long.csv", matrix_long_csv(matrix));
}

}  // namespace matl
