#include "matl/ppo.hpp"
#include "gradient_cases.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

namespace matl {
namespace {

using testing::random_tensor;

// A_t = sum_l (gamma lambda)^l delta_{t+l}, stopping after a done step.
std::vector<double> brute_force_gae(const std::vector<double>& r, const std::vector<double>& v,
                                    const std::vector<std::uint8_t>& done, double gamma, double lambda) {
  const std::size_t T = r.size();
  std::vector<double> delta(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double next = (t + 1 < T && !done[t]) ? v[t + 1] : 0.0;
    delta[t] = r[t] + gamma * next - v[t];
  }
  std::vector<double> adv(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double w = 1.0;
    for (std::size_t l = t; l < T; ++l) {
      adv[t] += w * delta[l];
      if (done[l]) break;
      w *= gamma * lambda;
    }
  }
  return adv;
}

TEST(Gae, MatchesBruteForceOnFiveStepSequences) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> r(5), v(5);
    std::vector<std::uint8_t> d(5, 0);
    for (int t = 0; t < 5; ++t) {
      r[t] = standard_normal(rng);
      v[t] = standard_normal(rng);
    }
    if (trial % 2) d[static_cast<std::size_t>(uniform_int(rng, 4))] = 1;
    d[4] = 1;
    const double gamma = 0.9 + 0.1 * uniform01(rng), lambda = uniform01(rng);
    const auto fast = gae(r, v, d, 0.0, gamma, lambda);
    const auto slow = brute_force_gae(r, v, d, gamma, lambda);
    for (int t = 0; t < 5; ++t) EXPECT_NEAR(fast[t], slow[t], 1e-12);
  }
}

TEST(Gae, LambdaZeroIsOneStepTemporalDifference) {
  const std::vector<double> r = {1.0, -0.5, 2.0, 0.25, -1.0};
  const std::vector<double> v = {0.3, 0.1, -0.2, 0.7, 0.4};
  const std::vector<std::uint8_t> d = {0, 0, 1, 0, 0};
  const double gamma = 0.97;
  const auto adv = gae(r, v, d, 0.6, gamma, 0.0);
  const std::vector<double> next = {v[1], v[2], 0.0, v[4], 0.6};
  for (int t = 0; t < 5; ++t) EXPECT_EQ(adv[t], r[t] + gamma * next[t] - v[t]);
}

TEST(Gae, UndiscountedWithZeroValuesIsRewardToGo) {
  const std::vector<double> r = {1.0, 2.0, 3.0, 4.0};
  const auto adv = gae(r, std::vector<double>(4, 0.0), std::vector<std::uint8_t>(4, 0), 0.0, 1.0, 1.0);
  EXPECT_EQ(adv, (std::vector<double>{10.0, 9.0, 7.0, 4.0}));
}

PpoConfig loss_config() {
  PpoConfig c;
  c.clip_epsilon = 0.2;
  c.value_coef = 0.5;
  c.entropy_coef = 0.01;
  return c;
}

TEST(PpoLoss, RatioOneGivesNegativeMeanAdvantage) {
  Graph g;
  const Tensor logits = Tensor::matrix(2, 3, {0.1, 0.5, -0.2, 1.0, 0.0, 0.3});
  Var lv = g.view(logits);
  const Tensor lp = log_softmax_rows(lv).value();
  LossBatch b{{1, 2}, {lp.at(0, 1), lp.at(1, 2)}, {2.0, -1.0}, {0.0, 0.0}, {1.0, 1.0}};
  const Tensor values = Tensor::matrix(2, 1, {0.0, 0.0});
  const LossTerms t = ppo_loss(lv, g.view(values), b, loss_config());
  EXPECT_NEAR(t.policy.value().item(), -0.5, 1e-15);
  EXPECT_EQ(t.clip_fraction, 0.0);
}

TEST(PpoLoss, ClipCapsRatioAtOnePointTwoForPositiveAdvantage) {
  Graph g;
  const Tensor logits = Tensor::matrix(1, 2, {0.0, 0.0});
  Var lv = g.view(logits);
  // pi(a) = 0.5; old pi(a) = 0.5 / 1.5 gives rho = 1.5.
  LossBatch b{{0}, {std::log(0.5 / 1.5)}, {1.0}, {0.0}, {1.0}};
  const Tensor values = Tensor::matrix(1, 1, {0.0});
  const LossTerms t = ppo_loss(lv, g.view(values), b, loss_config());
  EXPECT_NEAR(t.policy.value().item(), -1.2, 1e-12);
  EXPECT_EQ(t.clip_fraction, 1.0);
}

TEST(PpoLoss, FourSampleBufferMatchesScalarComputation) {
  const double eps = 0.2, c_v = 0.5, c_h = 0.01;
  const std::vector<std::vector<double>> logits = {{0.2, -0.4, 1.1}, {0.0, 0.3, -0.9}, {1.5, 0.2, 0.1}, {-0.3, -0.3, 0.8}};
  const std::vector<int> actions = {2, 0, 1, 2};
  const std::vector<double> old_lp = {-0.9, -1.6, -0.7, -1.3};
  const std::vector<double> adv = {1.3, -0.8, 0.4, -2.1};
  const std::vector<double> ret = {0.5, -0.2, 1.0, 0.0};
  const std::vector<double> val = {0.4, 0.1, 0.7, -0.3};
  const std::vector<double> w = {1.0, 1.0, 0.0, 1.0};

  double policy = 0.0, value = 0.0, entropy = 0.0, count = 0.0;
  for (int k = 0; k < 4; ++k) {
    if (w[k] == 0.0) continue;
    double z = 0.0;
    for (double l : logits[k]) z += std::exp(l);
    const double lp = logits[k][actions[k]] - std::log(z);
    const double rho = std::exp(lp - old_lp[k]);
    const double clipped = std::min(std::max(rho, 1.0 - eps), 1.0 + eps);
    policy += std::min(rho * adv[k], clipped * adv[k]);
    value += (val[k] - ret[k]) * (val[k] - ret[k]);
    for (double l : logits[k]) {
      const double p = std::exp(l) / z;
      entropy -= p * std::log(p);
    }
    count += 1.0;
  }
  policy = -policy / count;
  value /= count;
  entropy /= count;
  const double total = policy + c_v * value - c_h * entropy;

  Graph g;
  Tensor lt({4, 3}), vt({4, 1});
  for (int k = 0; k < 4; ++k) {
    for (int a = 0; a < 3; ++a) lt.mat()(k, a) = logits[k][a];
    vt[k] = val[k];
  }
  PpoConfig cfg;
  cfg.clip_epsilon = eps;
  cfg.value_coef = c_v;
  cfg.entropy_coef = c_h;
  const LossTerms t = ppo_loss(g.view(lt), g.view(vt), LossBatch{actions, old_lp, adv, ret, w}, cfg);
  EXPECT_NEAR(t.policy.value().item(), policy, 1e-10);
  EXPECT_NEAR(t.value.value().item(), value, 1e-10);
  EXPECT_NEAR(t.entropy.value().item(), entropy, 1e-10);
  EXPECT_NEAR(t.total.value().item(), total, 1e-10);
}

TEST(PpoLoss, AtRatioOneGradientIsVanillaPolicyGradient) {
  Rng rng(6);
  Tensor logits = random_tensor({5, 4}, rng);
  const std::vector<int> actions = {0, 3, 1, 1, 2};
  const std::vector<double> adv = {0.7, -1.2, 0.3, 2.0, -0.4};
  std::vector<double> old_lp;
  {
    Graph g;
    const Tensor lp = log_softmax_rows(g.view(logits)).value();
    for (int k = 0; k < 5; ++k) old_lp.push_back(lp.at(k, actions[k]));
  }
  const Tensor values({5, 1});
  {
    Graph g;
    LossTerms t = ppo_loss(g.parameter(logits), g.view(values),
                           LossBatch{actions, old_lp, adv, std::vector<double>(5, 0.0), std::vector<double>(5, 1.0)},
                           loss_config());
    g.backward(t.policy);
  }
  const std::vector<double> ppo_grad(logits.grad().begin(), logits.grad().end());
  logits.zero_grad();
  {
    // -(1/M) sum_k A_k log pi(a_k | s_k)
    Graph g;
    Var lp = pick_columns(log_softmax_rows(g.parameter(logits)), actions);
    g.backward(scale(sum_all(mul(lp, g.constant(Tensor({5}, adv)))), -0.2));
  }
  for (std::size_t i = 0; i < ppo_grad.size(); ++i) EXPECT_NEAR(ppo_grad[i], logits.grad()[i], 1e-8);
}

TEST(PpoLoss, MaskedSamplesDoNotContribute) {
  Graph g;
  const Tensor logits = Tensor::matrix(2, 2, {0.3, -0.1, 5.0, -5.0});
  const Tensor values = Tensor::matrix(2, 1, {1.0, 100.0});
  const LossTerms a = ppo_loss(g.view(logits), g.view(values), LossBatch{{0, 1}, {-0.5, -9.0}, {1.0, 50.0}, {0.0, 0.0}, {1.0, 0.0}}, loss_config());
  Graph h;
  const Tensor l1 = Tensor::matrix(1, 2, {0.3, -0.1});
  const Tensor v1 = Tensor::matrix(1, 1, {1.0});
  const LossTerms b = ppo_loss(h.view(l1), h.view(v1), LossBatch{{0}, {-0.5}, {1.0}, {0.0}, {1.0}}, loss_config());
  EXPECT_NEAR(a.total.value().item(), b.total.value().item(), 1e-15);
}

class PpoLossGradient : public ::testing::TestWithParam<int> {};

TEST_P(PpoLossGradient, FullLossThroughActorAndCriticMatchesCentralDifferences) {
  EXPECT_LT(testing::full_loss_gradient_error(GetParam()), 1e-3) << "seed " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(Seeds, PpoLossGradient, ::testing::Range(0, 20));

EnvConfig small_pp() {
  EnvConfig e = default_env_config(EnvKind::kPredatorPrey);
  e.grid_dim = 7;
  e.n_agents = 2;
  e.episode_length = 12;
  return e;
}

NetworkConfig tiny_net() {
  NetworkConfig c;
  c.actor_hidden = {8};
  c.critic_dim = 8;
  c.embed_hidden = {8};
  c.head_hidden = {8};
  return c;
}

TEST(Rollouts, BufferLayoutAndStoredLogProbabilities) {
  const EnvConfig env = small_pp();
  const Index d = observation_dim(env);
  const ActorParams actor = make_actor(d, 5, tiny_net(), 1);
  const CriticParams critic = make_critic(d, tiny_net(), 1);
  Rng rng(3);
  const RolloutBuffer b = collect_rollouts(actor, critic, env, 3, rng);
  ASSERT_EQ(b.episode_returns.size(), 3u);
  Index expected = 0;
  for (std::size_t e = 0; e < 3; ++e) {
    const Index end = e + 1 < 3 ? b.episode_starts[e + 1] : b.timesteps();
    EXPECT_LE(end - b.episode_starts[e], env.episode_length);
    expected += end - b.episode_starts[e];
  }
  EXPECT_EQ(b.samples(), expected * 2);
  EXPECT_EQ(b.observations.size(), static_cast<std::size_t>(b.samples() * d));
  for (Index t = 0; t < b.timesteps(); ++t) {
    const Tensor probs = actor_forward(actor, b.observations_at(t));
    const CriticTrace trace = critic_forward(critic, b.observations_at(t));
    for (Index i = 0; i < 2; ++i) {
      const auto k = static_cast<std::size_t>(t * 2 + i);
      EXPECT_NEAR(b.log_probs[k], std::log(probs.at(i, b.actions[k])), 1e-12);
      EXPECT_NEAR(b.values[k], trace.values[i], 1e-12);
    }
  }
}

TEST(Rollouts, UniformPolicySamplesActionsUniformly) {
  EnvConfig env = small_pp();
  env.episode_length = 100;
  const Index d = observation_dim(env);
  ActorParams actor = make_actor(d, 5, tiny_net(), 1);
  for (double& x : actor.mlp.layers.back().weight.data()) x = 0.0;
  const CriticParams critic = make_critic(d, tiny_net(), 1);
  Rng rng(17);
  const RolloutBuffer b = collect_rollouts(actor, critic, env, 20, rng);
  std::vector<double> counts(5, 0.0);
  for (int a : b.actions) counts[static_cast<std::size_t>(a)] += 1.0;
  const double expected = static_cast<double>(b.actions.size()) / 5.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 18.47);  // 4 degrees of freedom, p = 0.001
}

TEST(Rollouts, ComputeGaeReturnsAreAdvantagePlusValue) {
  const EnvConfig env = small_pp();
  const Index d = observation_dim(env);
  Rng rng(9);
  RolloutBuffer b = collect_rollouts(make_actor(d, 5, tiny_net(), 2), make_critic(d, tiny_net(), 2), env, 2, rng);
  compute_gae(b, 0.99, 0.95);
  ASSERT_TRUE(b.has_advantages());
  for (std::size_t k = 0; k < b.advantages.size(); ++k) EXPECT_EQ(b.returns[k], b.advantages[k] + b.values[k]);
}

TEST(Training, IsDeterministicForAFixedSeed) {
  TrainSetup s;
  s.env = small_pp();
  s.network = tiny_net();
  s.ppo.total_epochs = 2;
  s.ppo.episodes_per_batch = 2;
  s.ppo.minibatch_size = 8;
  s.seed = 42;
  const TrainResult a = train(s);
  const TrainResult b = train(s);
  const auto ta = named_tensors(a.actor);
  const auto tb = named_tensors(b.actor);
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i].second, *tb[i].second);
  const auto ca = named_tensors(a.critic);
  const auto cb = named_tensors(b.critic);
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_EQ(*ca[i].second, *cb[i].second);
  // Training moved the weights.
  const ActorParams init = make_actor(observation_dim(s.env), 5, s.network, s.seed);
  EXPECT_FALSE(init.mlp.layers[0].weight == a.actor.mlp.layers[0].weight);
}

TEST(Evaluation, GreedyIsDeterministicAndChecksObservationWidth) {
  const EnvConfig env = small_pp();
  const ActorParams actor = make_actor(observation_dim(env), 5, tiny_net(), 5);
  const EvalResult a = evaluate_greedy(actor, env, 4, 77);
  const EvalResult b = evaluate_greedy(actor, env, 4, 77);
  EXPECT_EQ(a.mean_total_reward, b.mean_total_reward);
  ASSERT_EQ(a.episodes.size(), 4u);
  EXPECT_EQ(greedy_action(std::vector<double>{0.3, 0.3, 0.2}), 0);
  EXPECT_EQ(greedy_action(std::vector<double>{0.1, 0.45, 0.45}), 1);
  EnvConfig other = env;
  other.vision = 1;
  EXPECT_THROW(evaluate_greedy(actor, other, 1, 1), ShapeError);
}

TEST(Config, RejectsOutOfRangeValues) {
  PpoConfig c;
  c.clip_epsilon = 0.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = PpoConfig{};
  c.gamma = 1.5;
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_NO_THROW(validate(PpoConfig{}));
}

}  // namespace
}  // namespace matl
