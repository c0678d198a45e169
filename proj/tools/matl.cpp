#include "matl/checkpoint.hpp"
#include "matl/config.hpp"
#include "matl/report.hpp"
#include "matl/transfer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace matl;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2, kPartial = 3 };

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// File values, then MATL_SEED, then --set overrides.
RunConfig resolve(const CommonOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig{} : load_config(opts.config_path);
  if (const char* env_seed = std::getenv("MATL_SEED"); env_seed && *env_seed) set_config_value(cfg, "run.seed", env_seed);
  for (const std::string& s : opts.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

std::string value_label(EnvKind kind) {
  return kind == EnvKind::kTrafficJunction ? "Success rate" : "Mean total reward";
}

void write_report(const EvalMatrix& m, EnvKind kind, const fs::path& dir, const std::vector<int>& eval_counts) {
  for (int n : eval_counts)
    write_text(dir / ("eval" + std::to_string(n) + ".svg"), line_plot_svg(m, n, value_label(kind)));
  write_text(dir / "heatmap.svg", heatmap_svg(m, value_label(kind)));
}

int cmd_train(const CommonOptions& opts, const std::string& env_kind, int agents, std::int64_t seed, int epochs,
              std::string out) {
  RunConfig cfg = resolve(opts);
  if (!env_kind.empty()) set_config_value(cfg, "env.kind", env_kind);
  if (agents > 0) cfg.env.n_agents = agents;
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  if (epochs > 0) cfg.ppo.total_epochs = epochs;
  validate(cfg.env);
  validate(cfg.ppo);
  if (out.empty())
    out = (fs::path(cfg.out) / ("agents" + std::to_string(cfg.env.n_agents) + "_seed" + std::to_string(cfg.seed) +
                                ".ckpt"))
              .string();

  TrainSetup setup{cfg.env, cfg.ppo, cfg.network, cfg.seed};
  std::string log = "epoch,mean_episode_return,policy_loss,value_loss,entropy,clip_fraction\n";
  TrainResult result = train(setup, [&](const TrainReport& r) {
    log += std::to_string(r.epoch) + "," + format_double(r.mean_episode_return) + "," + format_double(r.policy_loss) +
           "," + format_double(r.value_loss) + "," + format_double(r.entropy) + "," + format_double(r.clip_fraction) +
           "\n";
    if ((r.epoch + 1) % 10 == 0 || r.epoch + 1 == cfg.ppo.total_epochs)
      std::printf("epoch %d/%d  mean return %.3f  entropy %.3f\n", r.epoch + 1, cfg.ppo.total_epochs,
                  r.mean_episode_return, r.entropy);
  });
  const fs::path ckpt(out);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, make_checkpoint(result.actor, result.critic, training_metadata(setup, cfg.ppo.total_epochs)));
  write_text(fs::path(out + ".log.csv"), log);
  write_text(fs::path(out + ".config"), format_config(cfg));
  std::printf("wrote %s\n", out.c_str());
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, int agents, int episodes, std::uint64_t seed, std::string csv_path) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig cfg;
  for (const auto& [k, v] : ckpt.metadata)
    if (k.rfind("env.", 0) == 0) set_config_value(cfg, k, v);
  if (agents > 0) cfg.env.n_agents = agents;
  cfg.env.add_rate = cfg.env.add_rate_min;
  validate(cfg.env);
  const ActorParams actor = actor_from_checkpoint(ckpt);
  const EvalResult res = evaluate_greedy(actor, cfg.env, episodes, seed);

  std::string csv = "episode,seed,total_reward,success,steps\n";
  for (const EpisodeRecord& e : res.episodes)
    csv += std::to_string(e.episode) + "," + std::to_string(e.seed) + "," + format_double(e.total_reward) + "," +
           (e.success ? "1" : "0") + "," + std::to_string(e.steps) + "\n";
  if (csv_path.empty()) csv_path = ckpt_path + ".eval_agents" + std::to_string(cfg.env.n_agents) + ".csv";
  write_text(csv_path, csv);

  std::printf("env %s  agents %d  episodes %d\n", to_string(cfg.env.kind).c_str(), cfg.env.n_agents, episodes);
  std::printf("mean total reward %.6f\n", res.mean_total_reward);
  if (cfg.env.kind == EnvKind::kTrafficJunction) std::printf("success rate %.6f\n", res.success_rate);
  std::printf("episodes written to %s\n", csv_path.c_str());
  return kOk;
}

int cmd_matrix(const CommonOptions& opts, std::string out_dir, int jobs, bool resume) {
  RunConfig cfg = resolve(opts);
  if (!out_dir.empty()) cfg.out = out_dir;
  const TransferPlan plan = make_plan(cfg);
  validate(plan);
  const fs::path dir = plan.output_dir;
  if (!resume && fs::exists(dir / "checkpoints") && !fs::is_empty(dir / "checkpoints"))
    throw ConfigError(dir.string() + " already holds checkpoints; pass --resume to reuse them");
  fs::create_directories(dir);
  write_text(dir / "plan.resolved", format_config(cfg));

  auto log = [](const std::string& msg) {
    std::printf("%s\n", msg.c_str());
    std::fflush(stdout);
  };
  const CheckpointIndex index = run_training_grid(plan, jobs, log);
  const EvalMatrix matrix = run_eval_matrix(plan, index, jobs, log);
  export_matrix(matrix, dir);
  write_report(matrix, plan.env.kind, dir / "report", plan.eval_agent_counts);
  std::printf("%s", matrix_csv(matrix).c_str());
  if (!matrix.complete()) {
    std::fprintf(stderr, "matrix incomplete: some training runs failed (see checkpoints/index.csv)\n");
    return kPartial;
  }
  return kOk;
}

int cmd_report(const std::string& long_csv, const std::string& svg_out, std::vector<int> eval_counts,
               const std::string& env_kind) {
  const EvalMatrix m = parse_matrix_long(read_text(long_csv));
  if (eval_counts.empty()) eval_counts = m.eval_counts;
  const EnvKind kind = env_kind.empty() ? EnvKind::kPredatorPrey : parse_env_kind(env_kind);
  write_report(m, kind, svg_out, eval_counts);
  std::printf("wrote %zu plot(s) and heatmap.svg to %s\n", eval_counts.size(), svg_out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent PPO training and agent-count transfer experiments"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", common.sets, "override one config key, e.g. --set env.grid_dim=7");
  };

  std::string env_kind, out, ckpt, csv, out_dir, long_csv, svg_out;
  int agents = 0, epochs = 0, episodes = 100, jobs = 1;
  std::int64_t seed = -1;
  std::uint64_t eval_seed = 1;
  bool resume = false;
  std::vector<int> eval_counts;

  auto* train_cmd = app.add_subcommand("train", "train one model");
  add_common(train_cmd);
  train_cmd->add_option("--env", env_kind, "predator_prey or traffic_junction");
  train_cmd->add_option("--agents", agents, "agent count");
  train_cmd->add_option("--seed", seed, "training seed");
  train_cmd->add_option("--epochs", epochs, "training epochs");
  train_cmd->add_option("--out", out, "checkpoint path");

  auto* eval_cmd = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--agents", agents, "agent count (default: the training count)");
  eval_cmd->add_option("--episodes", episodes, "episodes")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
  eval_cmd->add_option("--csv", csv, "per-episode CSV path");

  auto* matrix_cmd = app.add_subcommand("matrix", "train and cross-evaluate the full transfer grid");
  add_common(matrix_cmd);
  matrix_cmd->add_option("--out-dir", out_dir, "output directory");
  matrix_cmd->add_option("--jobs", jobs, "parallel jobs")->check(CLI::PositiveNumber);
  matrix_cmd->add_flag("--resume", resume, "reuse completed checkpoints");

  auto* report_cmd = app.add_subcommand("report", "SVG plots from matrix_long.csv");
  report_cmd->add_option("--matrix-long", long_csv, "matrix_long.csv path")->required();
  report_cmd->add_option("--svg-out", svg_out, "output directory")->required();
  report_cmd->add_option("--eval-count", eval_counts, "eval counts to plot (default: all)");
  report_cmd->add_option("--env", env_kind, "environment kind, for the axis label");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(common, env_kind, agents, seed, epochs, out);
    if (*eval_cmd) return cmd_eval(ckpt, agents, episodes, eval_seed, csv);
    if (*matrix_cmd) return cmd_matrix(common, out_dir, jobs, resume);
    if (*report_cmd) return cmd_report(long_csv, svg_out, eval_counts, env_kind);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}
