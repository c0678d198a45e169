#pragma once

#include "matl/tensor.hpp"

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

namespace matl {

class Graph;

// Handle to a node recorded on a Graph. Cheap to copy; valid until the graph
// is cleared or consumed by backward().
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Tape of operations recorded during one forward pass. Nodes are appended in
// evaluation order, so reverse insertion order is a valid topological order
// for the backward sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);

  // Registers a trainable leaf. Gradients accumulate into param.grad() on
  // backward(). Registering the same tensor twice returns the same node.
  Var parameter(Tensor& param);

  // Non-owning constant leaf over `t`; `t` must outlive the tape.
  Var view(const Tensor& t);

  // Reverse sweep from a scalar loss. The tape is cleared afterwards.
  void backward(Var loss);

  void clear();
  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }
  Tensor& grad(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::span<const std::size_t> inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> param_ids_;
};

enum class ReduceKind { kSum, kMean };

Var matmul(Var a, Var b);
Var transpose(Var a);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);

// Elementwise. Binary ops accept equal shapes or a single-element operand.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var minimum(Var a, Var b);
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);
Var relu(Var x);
Var tanh(Var x);
Var log(Var x);
Var exp(Var x);
Var clamp(Var x, double lo, double hi);

Var concat_columns(Var a, Var b);
// Stacks rank-2 tensors with equal column counts.
Var concat_rows(std::span<const Var> parts);
Var reduce(Var x, Index axis, ReduceKind kind);
Var sum_all(Var x);
Var mean_all(Var x);

// out[r] = x[r, columns[r]]; shape [m].
Var pick_columns(Var x, std::span<const int> columns);

// Independent softmax(scale q k^T) v within each consecutive block of `group`
// rows; blocks never attend to each other.
Var grouped_attention(Var q, Var k, Var v, Index group, double scale);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace matl
