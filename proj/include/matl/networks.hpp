#pragma once

#include "matl/graph.hpp"
#include "matl/random.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace matl {

// Affine layer y = x W + b with W [in x out] and b [1 x out].
struct Dense {
  Tensor weight;
  Tensor bias;
};

// Layer sizes, input first. Hidden layers use tanh, the last layer is linear.
struct MlpSpec {
  std::vector<Index> layer_sizes;
};

struct Mlp {
  std::vector<Dense> layers;

  Index input_dim() const { return layers.front().weight.rows(); }
  Index output_dim() const { return layers.back().weight.cols(); }
};

struct ActorParams {
  Mlp mlp;
};

// One self-attention graph convolution: queries/keys/values then a one-layer
// feed-forward map with ReLU over [attention, input].
struct GraphConvParams {
  Tensor query;  // [d x d_k]
  Tensor key;    // [d x d_k]
  Tensor value;  // [d x d_v]
  Index key_dim = 0;
  Dense sigma;   // [(d_v + d) x d_out]
};

struct CriticParams {
  Mlp embed;
  GraphConvParams gc1;
  GraphConvParams gc2;
  Mlp head;
};

struct NetworkConfig {
  std::vector<Index> actor_hidden{64, 64};
  Index critic_dim = 64;               // d_e = d_k = d_v
  std::vector<Index> embed_hidden{64};
  std::vector<Index> head_hidden{64};
};

struct CriticTrace {
  Tensor embedding;      // E  [n x d_e]
  Tensor hidden;         // H  [n x d_e]
  Tensor hidden_second;  // H' [n x d_e]
  Tensor values;         // v  [n]
};

struct CriticVars {
  Var embedding;
  Var hidden;
  Var hidden_second;
  Var values;  // [n x 1]
};

// Orthogonal init scaled by `gain`; zero bias.
Dense make_dense(Index in, Index out, double gain, Rng& rng);
Mlp make_mlp(const MlpSpec& spec, Rng& rng, double output_gain = 1.0);
GraphConvParams make_graph_conv(Index dim, Index key_dim, Index value_dim, Index out_dim, Rng& rng);

ActorParams make_actor(Index obs_dim, Index n_actions, const NetworkConfig& config, std::uint64_t seed);
CriticParams make_critic(Index obs_dim, const NetworkConfig& config, std::uint64_t seed);

// Non-const overloads record trainable leaves; const overloads record views.
Var bind(Graph& g, Tensor& t);
Var bind(Graph& g, const Tensor& t);

// x [m x in] -> [m x out]; the bias is broadcast through a ones column so
// the tape only ever sees equal-shape elementwise ops.
Var dense_forward(Graph& g, Dense& layer, Var x);
Var dense_forward(Graph& g, const Dense& layer, Var x);
Var mlp_forward(Graph& g, Mlp& mlp, Var x);
Var mlp_forward(Graph& g, const Mlp& mlp, Var x);

Var actor_logits(Graph& g, ActorParams& params, Var observations);
Var actor_logits(Graph& g, const ActorParams& params, Var observations);

Var self_attention(Graph& g, GraphConvParams& params, Var h);
Var self_attention(Graph& g, const GraphConvParams& params, Var h);
// Row-stochastic [n x n] attention weights, as used inside self_attention.
Var attention_weights(Graph& g, const GraphConvParams& params, Var h);
Var graph_conv(Graph& g, GraphConvParams& params, Var h);
Var graph_conv(Graph& g, const GraphConvParams& params, Var h);

CriticVars critic_graph(Graph& g, CriticParams& params, Var observations);
CriticVars critic_graph(Graph& g, const CriticParams& params, Var observations);
// Several teams stacked row-wise, `team_size` rows each; attention stays
// within a team. Same values as running critic_graph per team.
CriticVars critic_graph_teams(Graph& g, CriticParams& params, Var observations, Index team_size);
CriticVars critic_graph_teams(Graph& g, const CriticParams& params, Var observations, Index team_size);

// Inference entry points (no gradient tracking).
Tensor actor_forward(const ActorParams& params, const Tensor& observations);
CriticTrace critic_forward(const CriticParams& params, const Tensor& observations);

std::vector<std::pair<std::string, Tensor*>> named_tensors(ActorParams& params);
std::vector<std::pair<std::string, Tensor*>> named_tensors(CriticParams& params);
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const ActorParams& params);
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const CriticParams& params);

std::vector<Tensor*> parameters(ActorParams& params);
std::vector<Tensor*> parameters(CriticParams& params);

}  // namespace matl
