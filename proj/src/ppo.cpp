#include "matl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace matl {

void validate(const PpoConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (!(c.clip_epsilon > 0.0 && c.clip_epsilon < 1.0)) fail("clip_epsilon must lie in (0, 1)");
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(c.gae_lambda > 0.0 && c.gae_lambda <= 1.0)) fail("gae_lambda must lie in (0, 1]");
  if (c.epochs_per_batch < 1) fail("epochs_per_batch must be positive");
  if (c.minibatch_size < 1) fail("minibatch_size must be positive");
  if (!(c.learning_rate > 0.0)) fail("learning_rate must be positive");
  if (c.episodes_per_batch < 1) fail("episodes_per_batch must be positive");
  if (c.total_epochs < 1) fail("total_epochs must be positive");
}

// ---------------------------------------------------------------------------
// Buffer

void RolloutBuffer::begin_episode() { episode_starts.push_back(timesteps()); }

void RolloutBuffer::add_step(const Tensor& obs, std::span<const int> acts, std::span<const double> logp,
                             std::span<const double> rews, std::span<const double> vals,
                             std::span<const std::uint8_t> done_flags, std::span<const std::uint8_t> acting) {
  const auto n = static_cast<std::size_t>(n_agents);
  if (obs.rows() != n_agents || obs.cols() != obs_dim || acts.size() != n || logp.size() != n ||
      rews.size() != n || vals.size() != n || done_flags.size() != n || acting.size() != n)
    throw ShapeError("RolloutBuffer::add_step: per-agent arrays disagree with the buffer layout");
  observations.insert(observations.end(), obs.data().begin(), obs.data().end());
  actions.insert(actions.end(), acts.begin(), acts.end());
  log_probs.insert(log_probs.end(), logp.begin(), logp.end());
  rewards.insert(rewards.end(), rews.begin(), rews.end());
  values.insert(values.end(), vals.begin(), vals.end());
  dones.insert(dones.end(), done_flags.begin(), done_flags.end());
  mask.insert(mask.end(), acting.begin(), acting.end());
}

void RolloutBuffer::end_episode(double team_return, bool success) {
  episode_returns.push_back(team_return);
  episode_success.push_back(success ? 1 : 0);
}

Tensor RolloutBuffer::observations_at(Index t) const {
  const auto begin = observations.begin() + t * n_agents * obs_dim;
  return Tensor({n_agents, obs_dim}, std::vector<double>(begin, begin + n_agents * obs_dim));
}

namespace {

int sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    acc += probs[a];
    if (u < acc) return static_cast<int>(a);
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace

RolloutBuffer collect_rollouts(const ActorParams& actor, const CriticParams& critic, const EnvConfig& env_config,
                               int episodes, Rng& rng) {
  auto env = make_environment(env_config);
  const Index n = env->n_agents();
  if (actor.mlp.input_dim() != env->obs_dim())
    throw ShapeError("actor expects " + std::to_string(actor.mlp.input_dim()) + " observation features, env emits " +
                     std::to_string(env->obs_dim()));
  RolloutBuffer buffer(n, env->obs_dim());
  std::vector<int> acts(static_cast<std::size_t>(n));
  std::vector<double> logp(static_cast<std::size_t>(n));
  std::vector<double> vals(static_cast<std::size_t>(n));

  for (int e = 0; e < episodes; ++e) {
    Tensor obs = env->reset(rng());
    buffer.begin_episode();
    double team_return = 0.0;
    for (;;) {
      const auto acting = env->active_agents();
      const Tensor probs = actor_forward(actor, obs);
      const CriticTrace trace = critic_forward(critic, obs);
      for (Index i = 0; i < n; ++i) {
        const auto row = probs.data().subspan(static_cast<std::size_t>(i * probs.cols()),
                                              static_cast<std::size_t>(probs.cols()));
        const int a = sample_categorical(row, rng);
        acts[static_cast<std::size_t>(i)] = a;
        logp[static_cast<std::size_t>(i)] = std::log(row[static_cast<std::size_t>(a)]);
        vals[static_cast<std::size_t>(i)] = trace.values[i];
      }
      StepResult step = env->step(acts);
      team_return += std::accumulate(step.rewards.begin(), step.rewards.end(), 0.0);
      buffer.add_step(obs, acts, logp, step.rewards, vals, step.agent_done, acting);
      obs = std::move(step.observations);
      if (step.done) {
        buffer.end_episode(team_return, step.info.success);
        break;
      }
    }
  }
  return buffer;
}

// ---------------------------------------------------------------------------
// Advantages

std::vector<double> gae(std::span<const double> rewards, std::span<const double> values,
                        std::span<const std::uint8_t> dones, double bootstrap, double gamma, double lambda) {
  const std::size_t T = rewards.size();
  if (values.size() != T || dones.size() != T) throw ShapeError("gae: sequence lengths differ");
  std::vector<double> adv(T, 0.0);
  double next_adv = 0.0;
  double next_value = bootstrap;
  for (std::size_t k = T; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    adv[k] = delta + gamma * lambda * live * next_adv;
    next_adv = adv[k];
    next_value = values[k];
  }
  return adv;
}

void compute_gae(RolloutBuffer& b, double gamma, double lambda) {
  const Index n = b.n_agents;
  const Index T = b.timesteps();
  b.advantages.assign(static_cast<std::size_t>(T * n), 0.0);
  b.returns.assign(static_cast<std::size_t>(T * n), 0.0);
  std::vector<double> r, v;
  std::vector<std::uint8_t> d;
  for (std::size_t e = 0; e < b.episode_starts.size(); ++e) {
    const Index start = b.episode_starts[e];
    const Index end = e + 1 < b.episode_starts.size() ? b.episode_starts[e + 1] : T;
    for (Index i = 0; i < n; ++i) {
      r.clear();
      v.clear();
      d.clear();
      for (Index t = start; t < end; ++t) {
        const auto k = static_cast<std::size_t>(t * n + i);
        r.push_back(b.rewards[k]);
        v.push_back(b.values[k]);
        d.push_back(b.dones[k]);
      }
      const auto adv = gae(r, v, d, 0.0, gamma, lambda);
      for (Index t = start; t < end; ++t) {
        const auto k = static_cast<std::size_t>(t * n + i);
        b.advantages[k] = adv[static_cast<std::size_t>(t - start)];
        b.returns[k] = b.advantages[k] + b.values[k];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Loss and update

LossTerms ppo_loss(Var logits, Var values, const LossBatch& batch, const PpoConfig& config) {
  Graph& g = logits.graph();
  const Index m = logits.rows();
  const auto rows = static_cast<std::size_t>(m);
  if (batch.actions.size() != rows || batch.old_log_probs.size() != rows || batch.advantages.size() != rows ||
      batch.returns.size() != rows || batch.weights.size() != rows || values.rows() != m || values.cols() != 1)
    throw ShapeError("ppo_loss: batch arrays must have one entry per logits row");
  const double weight_sum = std::accumulate(batch.weights.begin(), batch.weights.end(), 0.0);
  if (!(weight_sum > 0.0)) throw UsageError("ppo_loss: batch has no acting samples");
  const double inv = 1.0 / weight_sum;

  auto column = [&](const std::vector<double>& v) { return g.constant(Tensor({m}, v)); };
  Var weights = column(batch.weights);
  Var advantages = column(batch.advantages);

  Var log_probs = log_softmax_rows(logits);
  Var new_logp = pick_columns(log_probs, batch.actions);
  Var ratio = exp(sub(new_logp, column(batch.old_log_probs)));
  Var unclipped = mul(ratio, advantages);
  Var clipped = mul(clamp(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon), advantages);
  Var surrogate = minimum(unclipped, clipped);

  LossTerms out;
  out.policy = scale(sum_all(mul(surrogate, weights)), -inv);

  Var entropy_rows = reduce(mul(exp(log_probs), log_probs), 1, ReduceKind::kSum);
  out.entropy = scale(sum_all(mul(entropy_rows, weights)), -inv);

  Var diff = sub(reduce(values, 1, ReduceKind::kSum), column(batch.returns));
  out.value = scale(sum_all(mul(mul(diff, diff), weights)), inv);

  out.total = sub(add(out.policy, scale(out.value, config.value_coef)), scale(out.entropy, config.entropy_coef));

  double clipped_count = 0.0;
  const Tensor& rho = ratio.value();
  for (std::size_t k = 0; k < rows; ++k)
    if (std::abs(rho[static_cast<Index>(k)] - 1.0) > config.clip_epsilon) clipped_count += batch.weights[k];
  out.clip_fraction = clipped_count * inv;
  return out;
}

namespace {

std::vector<double> normalized_advantages(const RolloutBuffer& b, bool normalize) {
  std::vector<double> adv = b.advantages;
  if (!normalize) return adv;
  double sum = 0.0, count = 0.0;
  for (std::size_t k = 0; k < adv.size(); ++k)
    if (b.mask[k]) {
      sum += adv[k];
      count += 1.0;
    }
  if (count < 2.0) return adv;
  const double mean = sum / count;
  double var = 0.0;
  for (std::size_t k = 0; k < adv.size(); ++k)
    if (b.mask[k]) var += (adv[k] - mean) * (adv[k] - mean);
  const double std = std::sqrt(var / count);
  for (double& a : adv) a = (a - mean) / (std + 1e-8);
  return adv;
}

}  // namespace

TrainReport ppo_update(ActorParams& actor, CriticParams& critic, Adam& optimizer, const RolloutBuffer& buffer,
                       const PpoConfig& config, Rng& rng) {
  if (!buffer.has_advantages()) throw UsageError("ppo_update: compute_gae must run first");
  const Index n = buffer.n_agents;
  const Index T = buffer.timesteps();
  const Index d = buffer.obs_dim;
  const std::vector<double> adv = normalized_advantages(buffer, config.normalize_advantages);

  std::vector<Index> order(static_cast<std::size_t>(T));
  std::iota(order.begin(), order.end(), Index{0});

  TrainReport report;
  double updates = 0.0;
  Graph g;
  for (int pass = 0; pass < config.epochs_per_batch; ++pass) {
    for (Index k = T - 1; k > 0; --k) std::swap(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(k + 1))]);
    for (Index start = 0; start < T; start += config.minibatch_size) {
      const Index stop = std::min<Index>(T, start + config.minibatch_size);
      const Index rows = (stop - start) * n;
      LossBatch batch;
      Tensor obs({rows, d});
      for (Index s = start; s < stop; ++s) {
        const Index t = order[static_cast<std::size_t>(s)];
        const Index base = t * n;
        std::copy_n(buffer.observations.begin() + base * d, n * d, obs.data().begin() + (s - start) * n * d);
        for (Index i = 0; i < n; ++i) {
          const auto idx = static_cast<std::size_t>(base + i);
          batch.actions.push_back(buffer.actions[idx]);
          batch.old_log_probs.push_back(buffer.log_probs[idx]);
          batch.advantages.push_back(adv[idx]);
          batch.returns.push_back(buffer.returns[idx]);
          batch.weights.push_back(buffer.mask[idx] ? 1.0 : 0.0);
        }
      }
      if (std::accumulate(batch.weights.begin(), batch.weights.end(), 0.0) == 0.0) continue;

      g.clear();
      Var obs_var = g.view(obs);
      Var values = critic_graph_teams(g, critic, obs_var, n).values;
      Var logits = actor_logits(g, actor, obs_var);
      LossTerms loss = ppo_loss(logits, values, batch, config);
      const double total = loss.total.value().item();
      if (!std::isfinite(total)) {
        std::ostringstream msg;
        msg << "non-finite PPO loss (policy " << loss.policy.value().item() << ", value " << loss.value.value().item()
            << ", entropy " << loss.entropy.value().item() << ") at pass " << pass << ", minibatch offset " << start;
        throw TrainingDiverged(msg.str());
      }
      report.policy_loss += loss.policy.value().item();
      report.value_loss += loss.value.value().item();
      report.entropy += loss.entropy.value().item();
      report.clip_fraction += loss.clip_fraction;
      updates += 1.0;

      optimizer.zero_grad();
      g.backward(loss.total);
      optimizer.step();
    }
  }
  if (updates > 0) {
    report.policy_loss /= updates;
    report.value_loss /= updates;
    report.entropy /= updates;
    report.clip_fraction /= updates;
  }
  if (!buffer.episode_returns.empty())
    report.mean_episode_return =
        std::accumulate(buffer.episode_returns.begin(), buffer.episode_returns.end(), 0.0) /
        static_cast<double>(buffer.episode_returns.size());
  return report;
}

TrainResult train(const TrainSetup& setup, const std::function<void(const TrainReport&)>& on_report) {
  validate(setup.env);
  validate(setup.ppo);
  const Index obs_dim = observation_dim(setup.env);
  TrainResult out;
  out.actor = make_actor(obs_dim, action_count(setup.env.kind), setup.network, setup.seed);
  out.critic = make_critic(obs_dim, setup.network, setup.seed);

  std::vector<Tensor*> params = parameters(out.actor);
  for (Tensor* t : parameters(out.critic)) params.push_back(t);
  AdamOptions adam;
  adam.learning_rate = setup.ppo.learning_rate;
  Adam optimizer(params, adam);
  Rng rng(derive_seed(setup.seed, {0x7A11}));

  for (int epoch = 0; epoch < setup.ppo.total_epochs; ++epoch) {
    EnvConfig env = setup.env;
    if (env.kind == EnvKind::kTrafficJunction) env.add_rate = annealed_add_rate(env, epoch, setup.ppo.total_epochs);
    RolloutBuffer buffer = collect_rollouts(out.actor, out.critic, env, setup.ppo.episodes_per_batch, rng);
    compute_gae(buffer, setup.ppo.gamma, setup.ppo.gae_lambda);
    TrainReport report = ppo_update(out.actor, out.critic, optimizer, buffer, setup.ppo, rng);
    report.epoch = epoch;
    out.reports.push_back(report);
    if (on_report) on_report(report);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

int greedy_action(std::span<const double> probabilities) {
  return static_cast<int>(std::max_element(probabilities.begin(), probabilities.end()) - probabilities.begin());
}

namespace {

template <typename Policy>
EvalResult run_episodes(const EnvConfig& env_config, int n_episodes, std::uint64_t seed, Policy&& policy) {
  if (n_episodes < 1) throw UsageError("evaluation needs at least one episode");
  auto env = make_environment(env_config);
  EvalResult result;
  std::vector<int> acts(static_cast<std::size_t>(env->n_agents()));
  for (int e = 0; e < n_episodes; ++e) {
    EpisodeRecord rec;
    rec.episode = e;
    rec.seed = derive_seed(seed, {static_cast<std::uint64_t>(e)});
    Tensor obs = env->reset(rec.seed);
    Rng action_rng(derive_seed(rec.seed, {0xAC7}));
    for (;;) {
      policy(obs, acts, action_rng);
      const StepResult step = env->step(acts);
      rec.total_reward += std::accumulate(step.rewards.begin(), step.rewards.end(), 0.0);
      ++rec.steps;
      obs = step.observations;
      if (step.done) {
        rec.success = step.info.success;
        break;
      }
    }
    result.mean_total_reward += rec.total_reward;
    result.success_rate += rec.success ? 1.0 : 0.0;
    result.episodes.push_back(rec);
  }
  result.mean_total_reward /= n_episodes;
  result.success_rate /= n_episodes;
  return result;
}

}  // namespace

EvalResult evaluate_greedy(const ActorParams& actor, const EnvConfig& env_config, int n_episodes, std::uint64_t seed) {
  const Index expected = observation_dim(env_config);
  if (actor.mlp.input_dim() != expected)
    throw ShapeError("actor expects " + std::to_string(actor.mlp.input_dim()) +
                     " observation features but the environment emits " + std::to_string(expected));
  return run_episodes(env_config, n_episodes, seed, [&](const Tensor& obs, std::vector<int>& acts, Rng&) {
    const Tensor probs = actor_forward(actor, obs);
    for (Index i = 0; i < probs.rows(); ++i)
      acts[static_cast<std::size_t>(i)] = greedy_action(
          probs.data().subspan(static_cast<std::size_t>(i * probs.cols()), static_cast<std::size_t>(probs.cols())));
  });
}

EvalResult evaluate_uniform(const EnvConfig& env_config, int n_episodes, std::uint64_t seed) {
  const int n_actions = action_count(env_config.kind);
  return run_episodes(env_config, n_episodes, seed, [&](const Tensor&, std::vector<int>& acts, Rng& rng) {
    for (int& a : acts) a = uniform_int(rng, n_actions);
  });
}

}  // namespace matl
