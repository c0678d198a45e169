#include "matl/networks.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace matl {
namespace {

using testing::check_gradients;
using testing::random_tensor;
using testing::weighted_sum;

NetworkConfig small_config() {
  NetworkConfig c;
  c.actor_hidden = {6, 5};
  c.critic_dim = 4;
  c.embed_hidden = {5};
  c.head_hidden = {3};
  return c;
}

Tensor permute_rows(const Tensor& x, const std::vector<Index>& perm) {
  Tensor out(x.shape());
  for (Index r = 0; r < x.rows(); ++r) out.mat().row(r) = x.mat().row(perm[static_cast<std::size_t>(r)]);
  return out;
}

std::vector<Index> random_permutation(Index n, Rng& rng) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Index{0});
  for (Index i = n - 1; i > 0; --i) std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(i + 1)))]);
  return p;
}

TEST(Equivariance, ActorAndCriticCommuteWithAgentPermutations) {
  const Index obs_dim = 7, n = 6;
  NetworkConfig cfg;
  cfg.critic_dim = 16;
  cfg.actor_hidden = {16, 16};
  cfg.embed_hidden = {16};
  cfg.head_hidden = {16};
  const ActorParams actor = make_actor(obs_dim, 5, cfg, 3);
  const CriticParams critic = make_critic(obs_dim, cfg, 3);
  Rng rng(99);
  const Tensor obs = random_tensor({n, obs_dim}, rng);
  const Tensor probs = actor_forward(actor, obs);
  const CriticTrace trace = critic_forward(critic, obs);
  for (int trial = 0; trial < 100; ++trial) {
    const auto perm = random_permutation(n, rng);
    const Tensor p_obs = permute_rows(obs, perm);
    const Tensor p_probs = actor_forward(actor, p_obs);
    const CriticTrace p_trace = critic_forward(critic, p_obs);
    for (Index r = 0; r < n; ++r) {
      const Index src = perm[static_cast<std::size_t>(r)];
      for (Index c = 0; c < probs.cols(); ++c) EXPECT_NEAR(p_probs.at(r, c), probs.at(src, c), 1e-10);
      EXPECT_NEAR(p_trace.values[r], trace.values[src], 1e-10);
    }
  }
}

TEST(Attention, RowsSumToOneForEveryTeamSize) {
  Rng rng(5);
  const GraphConvParams gc = make_graph_conv(8, 8, 8, 8, rng);
  for (Index n : {1, 2, 3, 8, 50}) {
    Graph g;
    const Tensor h = random_tensor({n, 8}, rng, 3.0);
    const Tensor w = attention_weights(g, gc, g.view(h)).value();
    ASSERT_EQ(w.rows(), n);
    ASSERT_EQ(w.cols(), n);
    for (Index r = 0; r < n; ++r) {
      double sum = 0.0;
      for (Index c = 0; c < n; ++c) sum += w.at(r, c);
      EXPECT_NEAR(sum, 1.0, 1e-12) << "n=" << n;
    }
  }
}

TEST(Attention, TwoAgentHandComputedWeights) {
  GraphConvParams gc;
  gc.query = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  gc.key = Tensor::matrix(2, 2, {2.0, 0.0, 0.0, 1.0});
  gc.value = Tensor::matrix(2, 1, {1.0, -1.0});
  gc.key_dim = 2;
  gc.sigma = Dense{Tensor({3, 1}), Tensor({1, 1})};
  // h1 = (1, 0), h2 = (0, 1): q = h, k = (2, 0) and (0, 1).
  // scores / sqrt(2): row 1 = (2, 0)/sqrt2, row 2 = (0, 1)/sqrt2.
  const Tensor h = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  const double s = 1.0 / std::sqrt(2.0);
  const double a11 = std::exp(2 * s) / (std::exp(2 * s) + 1.0);
  const double a22 = std::exp(s) / (std::exp(s) + 1.0);
  Graph g;
  const Tensor w = attention_weights(g, gc, g.view(h)).value();
  EXPECT_NEAR(w.at(0, 0), a11, 1e-15);
  EXPECT_NEAR(w.at(0, 1), 1.0 - a11, 1e-15);
  EXPECT_NEAR(w.at(1, 0), 1.0 - a22, 1e-15);
  EXPECT_NEAR(w.at(1, 1), a22, 1e-15);
  // values v1 = 1, v2 = -1
  const Tensor out = self_attention(g, gc, g.view(h)).value();
  EXPECT_NEAR(out[0], a11 - (1.0 - a11), 1e-15);
  EXPECT_NEAR(out[1], (1.0 - a22) - a22, 1e-15);
}

TEST(Attention, ZeroQueryGivesUniformWeightsAndZeroValueGivesZeroMessage) {
  Rng rng(8);
  GraphConvParams gc = make_graph_conv(4, 4, 4, 4, rng);
  gc.query = Tensor({4, 4});
  const Tensor h = random_tensor({5, 4}, rng);
  Graph g;
  const Tensor w = attention_weights(g, gc, g.view(h)).value();
  for (double x : w.data()) EXPECT_DOUBLE_EQ(x, 0.2);
  gc.value = Tensor({4, 4});
  for (double x : self_attention(g, gc, g.view(h)).value().data()) EXPECT_EQ(x, 0.0);
  // With no message the convolution reduces to relu(h W_h + b) on the input half.
  const Tensor out = graph_conv(g, gc, g.view(h)).value();
  for (Index r = 0; r < 5; ++r)
    for (Index c = 0; c < 4; ++c) {
      double z = gc.sigma.bias[c];
      for (Index k = 0; k < 4; ++k) z += h.at(r, k) * gc.sigma.weight.at(4 + k, c);
      EXPECT_NEAR(out.at(r, c), std::max(z, 0.0), 1e-14);
    }
}

// Scalar-loop reference for the critic, written without the tape.
using Rows = std::vector<std::vector<double>>;

Rows affine(const Rows& x, const Dense& d) {
  Rows y(x.size(), std::vector<double>(static_cast<std::size_t>(d.weight.cols())));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (Index c = 0; c < d.weight.cols(); ++c) {
      double s = d.bias[c];
      for (Index k = 0; k < d.weight.rows(); ++k) s += x[r][static_cast<std::size_t>(k)] * d.weight.at(k, c);
      y[r][static_cast<std::size_t>(c)] = s;
    }
  return y;
}

Rows mlp_ref(Rows x, const Mlp& m) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    x = affine(x, m.layers[i]);
    if (i + 1 < m.layers.size())
      for (auto& row : x)
        for (double& v : row) v = std::tanh(v);
  }
  return x;
}

Rows project(const Rows& x, const Tensor& w) { return affine(x, Dense{w, Tensor({1, w.cols()})}); }

Rows conv_ref(const Rows& h, const GraphConvParams& p) {
  const Rows q = project(h, p.query), k = project(h, p.key), v = project(h, p.value);
  const std::size_t n = h.size();
  Rows cat(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < q[i].size(); ++c) dot += q[i][c] * k[j][c];
      s[j] = dot / std::sqrt(static_cast<double>(p.key_dim));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - mx));
    std::vector<double> msg(v[0].size(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < msg.size(); ++c) msg[c] += s[j] / z * v[j][c];
    cat[i] = msg;
    cat[i].insert(cat[i].end(), h[i].begin(), h[i].end());
  }
  Rows out = affine(cat, p.sigma);
  for (auto& row : out)
    for (double& x : row) x = std::max(x, 0.0);
  return out;
}

TEST(Critic, MatchesStraightLineReference) {
  Rng rng(21);
  const CriticParams critic = make_critic(6, small_config(), 4);
  for (Index n : {1, 3, 7}) {
    const Tensor obs = random_tensor({n, 6}, rng);
    Rows x(static_cast<std::size_t>(n));
    for (Index r = 0; r < n; ++r) x[static_cast<std::size_t>(r)] = {obs.mat().row(r).begin(), obs.mat().row(r).end()};
    const Rows e = mlp_ref(x, critic.embed);
    const Rows h1 = conv_ref(e, critic.gc1);
    const Rows h2 = conv_ref(h1, critic.gc2);
    Rows pooled = e;
    for (std::size_t r = 0; r < pooled.size(); ++r)
      for (std::size_t c = 0; c < pooled[r].size(); ++c) pooled[r][c] += h1[r][c] + h2[r][c];
    const Rows v = mlp_ref(pooled, critic.head);
    const CriticTrace trace = critic_forward(critic, obs);
    for (Index r = 0; r < n; ++r) EXPECT_NEAR(trace.values[r], v[static_cast<std::size_t>(r)][0], 1e-12);
  }
}

TEST(Critic, StackedTeamsMatchSeparateForwardPasses) {
  Rng rng(2);
  CriticParams critic = make_critic(5, small_config(), 9);
  const Index n = 3, teams = 4;
  const Tensor obs = random_tensor({n * teams, 5}, rng);
  Graph g;
  const Tensor stacked = critic_graph_teams(g, critic, g.view(obs), n).values.value();
  for (Index t = 0; t < teams; ++t) {
    Tensor part({n, 5});
    part.mat() = obs.mat().middleRows(t * n, n);
    const CriticTrace trace = critic_forward(critic, part);
    for (Index i = 0; i < n; ++i) EXPECT_NEAR(stacked[t * n + i], trace.values[i], 1e-13);
  }
  EXPECT_THROW(critic_graph_teams(g, critic, g.view(obs), 5), ShapeError);
}

void randomize_biases(std::vector<Tensor*> params, Rng& rng) {
  for (Tensor* t : params)
    if (t->rows() == 1)
      for (double& b : t->data()) b = 0.1 * standard_normal(rng);
}

class CriticGradient : public ::testing::TestWithParam<int> {};

TEST_P(CriticGradient, FullCriticMatchesCentralDifferences) {
  const int seed = GetParam();
  for (Index n : {2, 4}) {
    Rng rng(derive_seed(static_cast<std::uint64_t>(seed), {static_cast<std::uint64_t>(n)}));
    CriticParams critic = make_critic(4, small_config(), static_cast<std::uint64_t>(seed));
    randomize_biases(parameters(critic), rng);
    const Tensor obs = random_tensor({n, 4}, rng);
    const Tensor w = random_tensor({n, 1}, rng);
    const auto result = testing::check_param_gradients(
        [&](Graph& g) { return weighted_sum(g, critic_graph(g, critic, g.view(obs)).values, w); },
        parameters(critic));
    EXPECT_LT(result.relative_error, 1e-3) << "n=" << n << " seed " << seed;
    EXPECT_GT(result.analytic_norm, 0.0);
  }
}

TEST_P(CriticGradient, StackedTeamsMatchCentralDifferences) {
  const int seed = GetParam();
  Rng rng(derive_seed(static_cast<std::uint64_t>(seed), {77}));
  CriticParams critic = make_critic(4, small_config(), static_cast<std::uint64_t>(seed) + 100);
  randomize_biases(parameters(critic), rng);
  const Tensor obs = random_tensor({6, 4}, rng);
  const Tensor w = random_tensor({6, 1}, rng);
  const auto result = testing::check_param_gradients(
      [&](Graph& g) { return weighted_sum(g, critic_graph_teams(g, critic, g.view(obs), 2).values, w); },
      parameters(critic));
  EXPECT_LT(result.relative_error, 1e-3) << "seed " << seed;
}

class ActorGradient : public ::testing::TestWithParam<int> {};

TEST_P(ActorGradient, LogProbabilitiesMatchCentralDifferences) {
  const int seed = GetParam();
  Rng rng(derive_seed(static_cast<std::uint64_t>(seed), {3}));
  ActorParams actor = make_actor(5, 4, small_config(), static_cast<std::uint64_t>(seed));
  randomize_biases(parameters(actor), rng);
  // Enlarge the output layer so the check is not dominated by the small init gain.
  for (double& x : actor.mlp.layers.back().weight.data()) x *= 50.0;
  const Tensor obs = random_tensor({3, 5}, rng);
  const Tensor w = random_tensor({3, 4}, rng);
  const auto result = testing::check_param_gradients(
      [&](Graph& g) { return weighted_sum(g, log_softmax_rows(actor_logits(g, actor, g.view(obs))), w); },
      parameters(actor));
  EXPECT_LT(result.relative_error, 1e-3) << "seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(Seeds, CriticGradient, ::testing::Range(0, 20));
INSTANTIATE_TEST_SUITE_P(Seeds, ActorGradient, ::testing::Range(0, 20));

TEST(Networks, SameParametersRunAtEveryTeamSize) {
  const NetworkConfig cfg;
  const ActorParams actor = make_actor(9, 5, cfg, 1);
  const CriticParams critic = make_critic(9, cfg, 1);
  Rng rng(4);
  for (Index n = 1; n <= 80; ++n) {
    const Tensor obs = random_tensor({n, 9}, rng);
    EXPECT_EQ(actor_forward(actor, obs).rows(), n);
    EXPECT_EQ(critic_forward(critic, obs).values.size(), n);
  }
}

TEST(Networks, InitializationIsSeededAndOrthogonal) {
  const NetworkConfig cfg;
  const ActorParams a = make_actor(9, 5, cfg, 1);
  const ActorParams b = make_actor(9, 5, cfg, 1);
  const ActorParams c = make_actor(9, 5, cfg, 2);
  EXPECT_EQ(a.mlp.layers[0].weight, b.mlp.layers[0].weight);
  EXPECT_FALSE(a.mlp.layers[0].weight == c.mlp.layers[0].weight);
  // First layer [9 x 64]: rows are orthonormal.
  const MatrixXdr w = a.mlp.layers[0].weight.mat();
  const MatrixXdr gram = w * w.transpose();
  EXPECT_LT((gram - MatrixXdr::Identity(9, 9)).cwiseAbs().maxCoeff(), 1e-12);
  for (double x : a.mlp.layers[0].bias.data()) EXPECT_EQ(x, 0.0);
}

TEST(Networks, WrongObservationWidthIsAShapeError) {
  const ActorParams actor = make_actor(9, 5, NetworkConfig{}, 1);
  EXPECT_THROW(actor_forward(actor, Tensor({2, 8})), ShapeError);
}

}  // namespace
}  // namespace matl
