#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult matl(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + MATL_CLI + std::string(" ") + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("matl_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const std::string kTiny =
    "--set env.grid_dim=7 --set env.episode_length=10 --set ppo.total_epochs=2 --set ppo.episodes_per_batch=2 "
    "--set network.actor_hidden=8 --set network.critic_dim=8 --set network.embed_hidden=8 "
    "--set network.head_hidden=8";

}  // namespace

TEST(Cli, TrainIsDeterministicAndEchoReproduces) {
  const fs::path dir = fresh_dir("train");
  const CliResult a = matl("train " + kTiny + " --agents 3 --seed 4 --out " + (dir / "a.ckpt").string());
  ASSERT_EQ(a.code, 0) << a.out;
  const CliResult b = matl("train " + kTiny + " --agents 3 --seed 4 --out " + (dir / "b.ckpt").string());
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "a.ckpt.log.csv"));

  const CliResult c = matl("train --config " + (dir / "a.ckpt.config").string() + " --out " + (dir / "c.ckpt").string());
  ASSERT_EQ(c.code, 0) << c.out;
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "c.ckpt"));
  EXPECT_EQ(slurp(dir / "a.ckpt.config"), slurp(dir / "c.ckpt.config"));
}

TEST(Cli, SeedEnvironmentVariable) {
  const fs::path dir = fresh_dir("seed");
  ASSERT_EQ(matl("train " + kTiny + " --out " + (dir / "env.ckpt").string(), "MATL_SEED=9").code, 0);
  ASSERT_EQ(matl("train " + kTiny + " --seed 9 --out " + (dir / "flag.ckpt").string()).code, 0);
  ASSERT_EQ(matl("train " + kTiny + " --out " + (dir / "plain.ckpt").string()).code, 0);
  EXPECT_EQ(slurp(dir / "env.ckpt"), slurp(dir / "flag.ckpt"));
  EXPECT_NE(slurp(dir / "env.ckpt"), slurp(dir / "plain.ckpt"));
}

TEST(Cli, UsageErrors) {
  const CliResult cap = matl("train --env predator_prey --agents 200");
  EXPECT_EQ(cap.code, 1);
  EXPECT_NE(cap.out.find("capacity"), std::string::npos) << cap.out;
  const CliResult key = matl("train --set ppo.learning_rat=0.1");
  EXPECT_EQ(key.code, 1);
  EXPECT_NE(key.out.find("ppo.learning_rat"), std::string::npos) << key.out;
  EXPECT_EQ(matl("").code, 1);
  EXPECT_EQ(matl("train --no-such-flag").code, 1);
}

TEST(Cli, EvalAcrossCountsAndCorruption) {
  const fs::path dir = fresh_dir("eval");
  const fs::path ckpt = dir / "m.ckpt";
  ASSERT_EQ(matl("train --set env.episode_length=10 --set ppo.total_epochs=1 --set ppo.episodes_per_batch=1 "
                 "--set network.actor_hidden=8 --set network.critic_dim=8 --agents 2 --out " + ckpt.string())
                .code,
            0);
  const CliResult r = matl("eval --ckpt " + ckpt.string() + " --agents 80 --episodes 2 --csv " + (dir / "e.csv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("mean total reward"), std::string::npos) << r.out;
  const std::string csv = slurp(dir / "e.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);

  const CliResult again = matl("eval --ckpt " + ckpt.string() + " --agents 80 --episodes 2 --csv " + (dir / "f.csv").string());
  EXPECT_EQ(slurp(dir / "f.csv"), csv);

  std::string bytes = slurp(ckpt);
  bytes[bytes.size() / 2] ^= 0x10;
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
  const CliResult bad = matl("eval --ckpt " + (dir / "bad.ckpt").string());
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("CRC"), std::string::npos) << bad.out;
}

TEST(Cli, TrafficJunctionEvalReportsSuccess) {
  const fs::path dir = fresh_dir("tj");
  const fs::path ckpt = dir / "tj.ckpt";
  ASSERT_EQ(matl("train --env traffic_junction --set env.grid_dim=7 --set env.episode_length=10 "
                 "--set ppo.total_epochs=1 --set ppo.episodes_per_batch=1 --set network.actor_hidden=8 "
                 "--set network.critic_dim=8 --out " + ckpt.string())
                .code,
            0);
  const CliResult r = matl("eval --ckpt " + ckpt.string() + " --agents 5 --episodes 3");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("success rate"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("traffic_junction"), std::string::npos) << r.out;
}

TEST(Cli, MatrixResumeAndReport) {
  const fs::path dir = fresh_dir("matrix");
  const std::string plan = kTiny +
                           " --set plan.train_agent_counts=1,2 --set plan.eval_agent_counts=1,2,3 "
                           "--set plan.train_seeds=1 --set plan.eval_seeds=1 --set plan.episodes_per_eval=2";
  const CliResult first = matl("matrix " + plan + " --out-dir " + dir.string());
  ASSERT_EQ(first.code, 0) << first.out;
  for (const char* f : {"matrix.csv", "matrix_long.csv", "plan.resolved", "report/heatmap.svg", "report/eval3.svg",
                        "checkpoints/index.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const std::string lng = slurp(dir / "matrix_long.csv");

  EXPECT_EQ(matl("matrix " + plan + " --out-dir " + dir.string()).code, 1);
  const CliResult resumed = matl("matrix " + plan + " --out-dir " + dir.string() + " --resume --jobs 2");
  ASSERT_EQ(resumed.code, 0) << resumed.out;
  EXPECT_EQ(resumed.out.find("\ntrain "), std::string::npos) << resumed.out;
  EXPECT_EQ(slurp(dir / "matrix_long.csv"), lng);

  const fs::path svg = dir / "svg";
  const CliResult rep = matl("report --matrix-long " + (dir / "matrix_long.csv").string() + " --svg-out " + svg.string() +
                       " --eval-count 2");
  ASSERT_EQ(rep.code, 0) << rep.out;
  EXPECT_EQ(slurp(svg / "eval2.svg"), slurp(dir / "report" / "eval2.svg"));
  const CliResult missing = matl("report --matrix-long " + (dir / "matrix_long.csv").string() + " --svg-out " +
                           svg.string() + " --eval-count 7");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.out.find("available: 1, 2, 3"), std::string::npos) << missing.out;
}
