#include "matl/networks.hpp"

#include <Eigen/QR>

#include <cmath>

namespace matl {

namespace {

// Orthogonal [rows x cols] matrix scaled by gain: QR of a Gaussian matrix
// with the sign convention that diag(R) is positive.
Tensor orthogonal(Index rows, Index cols, double gain, Rng& rng) {
  const bool tall = rows >= cols;
  const Index big = tall ? rows : cols;
  const Index small = tall ? cols : rows;
  Eigen::MatrixXd gauss(big, small);
  for (Index j = 0; j < small; ++j)
    for (Index i = 0; i < big; ++i) gauss(i, j) = standard_normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Index j = 0; j < small; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  Tensor out({rows, cols});
  if (tall)
    out.mat() = gain * q;
  else
    out.mat() = gain * q.transpose();
  return out;
}

Var ones_column(Graph& g, Index rows) { return g.constant(Tensor::filled({rows, 1}, 1.0)); }

template <typename D>
Var dense_impl(Graph& g, D& layer, Var x) {
  const Index m = x.rows();
  Var y = matmul(x, bind(g, layer.weight));
  return add(y, matmul(ones_column(g, m), bind(g, layer.bias)));
}

template <typename M>
Var mlp_impl(Graph& g, M& mlp, Var x) {
  if (x.cols() != mlp.input_dim())
    throw ShapeError("mlp: input has " + std::to_string(x.cols()) + " features, expected " +
                     std::to_string(mlp.input_dim()));
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    x = dense_forward(g, mlp.layers[i], x);
    if (i + 1 < mlp.layers.size()) x = tanh(x);
  }
  return x;
}

template <typename P>
Var attention_impl(Graph& g, P& params, Var h) {
  if (h.cols() != params.query.rows())
    throw ShapeError("self_attention: input width " + std::to_string(h.cols()) +
                     " does not match W_Q rows " + std::to_string(params.query.rows()));
  Var q = matmul(h, bind(g, params.query));
  Var k = matmul(h, bind(g, params.key));
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(params.key_dim)));
  return softmax_rows(scores);
}

template <typename P>
Var self_attention_impl(Graph& g, P& params, Var h) {
  Var weights = attention_impl(g, params, h);
  return matmul(weights, matmul(h, bind(g, params.value)));
}

template <typename P>
Var graph_conv_impl(Graph& g, P& params, Var h) {
  Var attended = self_attention(g, params, h);
  return relu(dense_forward(g, params.sigma, concat_columns(attended, h)));
}

template <typename P>
Var grouped_conv_impl(Graph& g, P& params, Var h, Index team) {
  if (team == h.rows()) return graph_conv(g, params, h);
  Var q = matmul(h, bind(g, params.query));
  Var k = matmul(h, bind(g, params.key));
  Var v = matmul(h, bind(g, params.value));
  Var attended = grouped_attention(q, k, v, team, 1.0 / std::sqrt(static_cast<double>(params.key_dim)));
  return relu(dense_forward(g, params.sigma, concat_columns(attended, h)));
}

template <typename P>
CriticVars critic_impl(Graph& g, P& params, Var obs, Index team) {
  if (obs.rows() < 1 || team < 1) throw ShapeError("critic: at least one agent required");
  if (obs.rows() % team != 0)
    throw ShapeError("critic: " + std::to_string(obs.rows()) + " rows are not whole teams of " +
                     std::to_string(team));
  CriticVars out;
  out.embedding = mlp_forward(g, params.embed, obs);
  out.hidden = grouped_conv_impl(g, params.gc1, out.embedding, team);
  out.hidden_second = grouped_conv_impl(g, params.gc2, out.hidden, team);
  Var pooled = add(add(out.embedding, out.hidden), out.hidden_second);
  out.values = mlp_forward(g, params.head, pooled);
  return out;
}

template <typename T, typename A>
std::vector<std::pair<std::string, T*>> actor_names(A& p) {
  std::vector<std::pair<std::string, T*>> out;
  for (std::size_t i = 0; i < p.mlp.layers.size(); ++i) {
    out.emplace_back("actor.mlp." + std::to_string(i) + ".weight", &p.mlp.layers[i].weight);
    out.emplace_back("actor.mlp." + std::to_string(i) + ".bias", &p.mlp.layers[i].bias);
  }
  return out;
}

template <typename T, typename M>
void mlp_names(std::vector<std::pair<std::string, T*>>& out, const std::string& prefix, M& mlp) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    out.emplace_back(prefix + std::to_string(i) + ".weight", &mlp.layers[i].weight);
    out.emplace_back(prefix + std::to_string(i) + ".bias", &mlp.layers[i].bias);
  }
}

template <typename T, typename G>
void conv_names(std::vector<std::pair<std::string, T*>>& out, const std::string& prefix, G& gc) {
  out.emplace_back(prefix + "query", &gc.query);
  out.emplace_back(prefix + "key", &gc.key);
  out.emplace_back(prefix + "value", &gc.value);
  out.emplace_back(prefix + "sigma.weight", &gc.sigma.weight);
  out.emplace_back(prefix + "sigma.bias", &gc.sigma.bias);
}

template <typename T, typename C>
std::vector<std::pair<std::string, T*>> critic_names(C& p) {
  std::vector<std::pair<std::string, T*>> out;
  mlp_names<T>(out, "critic.embed.", p.embed);
  conv_names<T>(out, "critic.gc1.", p.gc1);
  conv_names<T>(out, "critic.gc2.", p.gc2);
  mlp_names<T>(out, "critic.head.", p.head);
  return out;
}

}  // namespace

Dense make_dense(Index in, Index out, double gain, Rng& rng) {
  return Dense{orthogonal(in, out, gain, rng), Tensor({1, out})};
}

Mlp make_mlp(const MlpSpec& spec, Rng& rng, double output_gain) {
  const auto& sizes = spec.layer_sizes;
  if (sizes.size() < 2) throw ShapeError("MlpSpec needs at least input and output sizes");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    if (sizes[i] <= 0 || sizes[i + 1] <= 0) throw ShapeError("MlpSpec sizes must be positive");
    const double gain = (i + 2 == sizes.size()) ? output_gain : 1.0;
    mlp.layers.push_back(make_dense(sizes[i], sizes[i + 1], gain, rng));
  }
  return mlp;
}

GraphConvParams make_graph_conv(Index dim, Index key_dim, Index value_dim, Index out_dim, Rng& rng) {
  if (key_dim <= 0) throw ShapeError("graph conv key dimension must be positive");
  GraphConvParams p;
  p.query = orthogonal(dim, key_dim, 1.0, rng);
  p.key = orthogonal(dim, key_dim, 1.0, rng);
  p.value = orthogonal(dim, value_dim, 1.0, rng);
  p.key_dim = key_dim;
  p.sigma = make_dense(value_dim + dim, out_dim, 1.0, rng);
  return p;
}

ActorParams make_actor(Index obs_dim, Index n_actions, const NetworkConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0xAC}));
  MlpSpec spec;
  spec.layer_sizes.push_back(obs_dim);
  for (Index h : config.actor_hidden) spec.layer_sizes.push_back(h);
  spec.layer_sizes.push_back(n_actions);
  return ActorParams{make_mlp(spec, rng, 0.01)};
}

CriticParams make_critic(Index obs_dim, const NetworkConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0xC1}));
  const Index d = config.critic_dim;
  CriticParams p;
  MlpSpec embed{{obs_dim}};
  for (Index h : config.embed_hidden) embed.layer_sizes.push_back(h);
  embed.layer_sizes.push_back(d);
  p.embed = make_mlp(embed, rng);
  p.gc1 = make_graph_conv(d, d, d, d, rng);
  p.gc2 = make_graph_conv(d, d, d, d, rng);
  MlpSpec head{{d}};
  for (Index h : config.head_hidden) head.layer_sizes.push_back(h);
  head.layer_sizes.push_back(1);
  p.head = make_mlp(head, rng);
  return p;
}

Var bind(Graph& g, Tensor& t) { return g.parameter(t); }
Var bind(Graph& g, const Tensor& t) { return g.view(t); }

Var dense_forward(Graph& g, Dense& layer, Var x) { return dense_impl(g, layer, x); }
Var dense_forward(Graph& g, const Dense& layer, Var x) { return dense_impl(g, layer, x); }
Var mlp_forward(Graph& g, Mlp& mlp, Var x) { return mlp_impl(g, mlp, x); }
Var mlp_forward(Graph& g, const Mlp& mlp, Var x) { return mlp_impl(g, mlp, x); }

Var actor_logits(Graph& g, ActorParams& params, Var obs) { return mlp_impl(g, params.mlp, obs); }
Var actor_logits(Graph& g, const ActorParams& params, Var obs) { return mlp_impl(g, params.mlp, obs); }

Var attention_weights(Graph& g, const GraphConvParams& params, Var h) {
  return attention_impl(g, params, h);
}
Var self_attention(Graph& g, GraphConvParams& params, Var h) { return self_attention_impl(g, params, h); }
Var self_attention(Graph& g, const GraphConvParams& params, Var h) {
  return self_attention_impl(g, params, h);
}
Var graph_conv(Graph& g, GraphConvParams& params, Var h) { return graph_conv_impl(g, params, h); }
Var graph_conv(Graph& g, const GraphConvParams& params, Var h) { return graph_conv_impl(g, params, h); }

CriticVars critic_graph(Graph& g, CriticParams& params, Var obs) { return critic_impl(g, params, obs, obs.rows()); }
CriticVars critic_graph(Graph& g, const CriticParams& params, Var obs) {
  return critic_impl(g, params, obs, obs.rows());
}
CriticVars critic_graph_teams(Graph& g, CriticParams& params, Var obs, Index team_size) {
  return critic_impl(g, params, obs, team_size);
}
CriticVars critic_graph_teams(Graph& g, const CriticParams& params, Var obs, Index team_size) {
  return critic_impl(g, params, obs, team_size);
}

Tensor actor_forward(const ActorParams& params, const Tensor& observations) {
  Graph g;
  return softmax_rows(actor_logits(g, params, g.view(observations))).value();
}

CriticTrace critic_forward(const CriticParams& params, const Tensor& observations) {
  Graph g;
  const CriticVars v = critic_graph(g, params, g.view(observations));
  CriticTrace trace{v.embedding.value(), v.hidden.value(), v.hidden_second.value(),
                    Tensor({v.values.rows()})};
  const Tensor& vals = v.values.value();
  for (Index i = 0; i < vals.size(); ++i) trace.values[i] = vals[i];
  return trace;
}

std::vector<std::pair<std::string, Tensor*>> named_tensors(ActorParams& p) { return actor_names<Tensor>(p); }
std::vector<std::pair<std::string, Tensor*>> named_tensors(CriticParams& p) { return critic_names<Tensor>(p); }
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const ActorParams& p) {
  return actor_names<const Tensor>(p);
}
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const CriticParams& p) {
  return critic_names<const Tensor>(p);
}

std::vector<Tensor*> parameters(ActorParams& params) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors(params)) out.push_back(t);
  return out;
}

std::vector<Tensor*> parameters(CriticParams& params) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors(params)) out.push_back(t);
  return out;
}

}  // namespace matl
