#include "matl/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace matl {

std::vector<int> default_agent_counts(EnvKind kind) {
  if (kind == EnvKind::kTrafficJunction) return {3, 5, 10, 15, 20};
  return {2, 5, 10, 20, 50, 80};
}

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot read '" + value + "' as " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text, const char* what) {
  T out{};
  const std::string v = trim(text);
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || v.empty()) bad_value(key, text, what);
  return out;
}

double parse_double(const std::string& key, const std::string& v) { return parse_number<double>(key, v, "a number"); }
int parse_int(const std::string& key, const std::string& v) { return parse_number<int>(key, v, "an integer"); }
std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return parse_number<std::uint64_t>(key, v, "an unsigned integer");
}

bool parse_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  bad_value(key, v, "true or false");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F&& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(one(key, item));
  if (out.empty()) bad_value(key, v, "a comma-separated list");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define MATL_DOUBLE(name, member)                                                              \
  Field {                                                                                      \
    name, [](const RunConfig& c) { return format_double(c.member); },                          \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(name, v); }           \
  }
#define MATL_INT(name, member)                                                                 \
  Field {                                                                                      \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                         \
        [](RunConfig& c, const std::string& v) { c.member = parse_int(name, v); }              \
  }
#define MATL_INDEX_LIST(name, member)                                                          \
  Field {                                                                                      \
    name, [](const RunConfig& c) { return join(c.member); },                                   \
        [](RunConfig& c, const std::string& v) {                                               \
          c.member.clear();                                                                    \
          for (int x : parse_list<int>(name, v, parse_int)) c.member.push_back(x);             \
        }                                                                                      \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"env.kind", [](const RunConfig& c) { return to_string(c.env.kind); },
       [](RunConfig& c, const std::string& v) {
         const EnvKind kind = parse_env_kind(trim(v));
         if (kind != c.env.kind) {
           c.env = default_env_config(kind);
           c.plan.train_agent_counts = c.plan.eval_agent_counts = default_agent_counts(kind);
         }
       }},
      MATL_INT("env.n_agents", env.n_agents),
      MATL_INT("env.grid_dim", env.grid_dim),
      MATL_INT("env.episode_length", env.episode_length),
      MATL_INT("env.vision", env.vision),
      MATL_INT("env.prey_count", env.prey_count),
      MATL_DOUBLE("env.capture_reward", env.capture_reward),
      MATL_DOUBLE("env.step_reward", env.step_reward),
      MATL_DOUBLE("env.lone_penalty", env.lone_penalty),
      MATL_DOUBLE("env.prey_flee_prob", env.prey_flee_prob),
      MATL_DOUBLE("env.collision_reward", env.collision_reward),
      MATL_DOUBLE("env.time_penalty", env.time_penalty),
      MATL_DOUBLE("env.add_rate_max", env.add_rate_max),
      MATL_DOUBLE("env.add_rate_min", env.add_rate_min),
      MATL_DOUBLE("ppo.clip_epsilon", ppo.clip_epsilon),
      MATL_DOUBLE("ppo.gamma", ppo.gamma),
      MATL_DOUBLE("ppo.gae_lambda", ppo.gae_lambda),
      MATL_INT("ppo.epochs_per_batch", ppo.epochs_per_batch),
      MATL_INT("ppo.minibatch_size", ppo.minibatch_size),
      MATL_DOUBLE("ppo.learning_rate", ppo.learning_rate),
      MATL_DOUBLE("ppo.value_coef", ppo.value_coef),
      MATL_DOUBLE("ppo.entropy_coef", ppo.entropy_coef),
      MATL_INT("ppo.episodes_per_batch", ppo.episodes_per_batch),
      MATL_INT("ppo.total_epochs", ppo.total_epochs),
      {"ppo.normalize_advantages",
       [](const RunConfig& c) { return std::string(c.ppo.normalize_advantages ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.ppo.normalize_advantages = parse_bool("ppo.normalize_advantages", v); }},
      MATL_INDEX_LIST("network.actor_hidden", network.actor_hidden),
      {"network.critic_dim", [](const RunConfig& c) { return std::to_string(c.network.critic_dim); },
       [](RunConfig& c, const std::string& v) { c.network.critic_dim = parse_int("network.critic_dim", v); }},
      MATL_INDEX_LIST("network.embed_hidden", network.embed_hidden),
      MATL_INDEX_LIST("network.head_hidden", network.head_hidden),
      MATL_INDEX_LIST("plan.train_agent_counts", plan.train_agent_counts),
      MATL_INDEX_LIST("plan.eval_agent_counts", plan.eval_agent_counts),
      {"plan.train_seeds", [](const RunConfig& c) { return join(c.plan.train_seeds); },
       [](RunConfig& c, const std::string& v) {
         c.plan.train_seeds = parse_list<std::uint64_t>("plan.train_seeds", v, parse_u64);
       }},
      {"plan.eval_seeds", [](const RunConfig& c) { return join(c.plan.eval_seeds); },
       [](RunConfig& c, const std::string& v) {
         c.plan.eval_seeds = parse_list<std::uint64_t>("plan.eval_seeds", v, parse_u64);
       }},
      MATL_INT("plan.episodes_per_eval", plan.episodes_per_eval),
      {"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); }},
      {"run.out", [](const RunConfig& c) { return c.out; },
       [](RunConfig& c, const std::string& v) { c.out = trim(v); }},
  };
  return table;
}

#undef MATL_DOUBLE
#undef MATL_INT
#undef MATL_INDEX_LIST

}  // namespace

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const Field& f : fields())
    if (f.key == key) {
      f.set(config, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(const std::string& text, RunConfig config) {
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set_config_value(config, key, trim(line.substr(eq + 1)));
  }
  return config;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string format_config(const RunConfig& config) {
  std::string out, section;
  for (const Field& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      out += (section.empty() ? "" : "\n") + ("[" + s + "]\n");
      section = s;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(config) + "\n";
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> model_settings(const EnvConfig& env, const NetworkConfig& network) {
  RunConfig c;
  c.env = env;
  c.network = network;
  std::vector<std::pair<std::string, std::string>> out;
  for (const Field& f : fields())
    if (f.key.rfind("env.", 0) == 0 || f.key.rfind("network.", 0) == 0) out.emplace_back(f.key, f.get(c));
  return out;
}

}  // namespace matl
