#include "matl/graph.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

namespace matl {

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

namespace {

ArrayMap arr(Tensor& t) { return {t.data().data(), t.size()}; }
ConstArrayMap arr(const Tensor& t) { return {t.data().data(), t.size()}; }

Graph& same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph())
    throw UsageError("operands recorded on different graphs");
  return a.graph();
}

}  // namespace

const Tensor& Var::value() const { return graph_->value(id_); }

Var Graph::constant(Tensor value) { return record(std::move(value), {}, nullptr); }

Var Graph::parameter(Tensor& param) {
  if (auto it = param_ids_.find(&param); it != param_ids_.end())
    return Var(this, it->second);
  if (!param.requires_grad()) param.set_requires_grad(true);
  Node node;
  node.ref = &param;
  node.param = &param;
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  param_ids_.emplace(&param, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::view(const Tensor& t) {
  if (auto it = param_ids_.find(&t); it != param_ids_.end()) return Var(this, it->second);
  Node node;
  node.ref = &t;
  nodes_.push_back(std::move(node));
  param_ids_.emplace(&t, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
#ifndef NDEBUG
  assert(value.all_finite() && "non-finite value produced in forward pass");
#endif
  Node node;
  node.value = std::move(value);
  node.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].needs_grad; });
  node.inputs = std::move(inputs);
  if (node.needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad(std::size_t id) {
  Node& node = nodes_[id];
  const Tensor& v = value(id);
  if (node.grad.size() != v.size() || node.grad.shape() != v.shape()) node.grad = Tensor(v.shape());
  return node.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw UsageError("loss belongs to another graph");
  if (loss.value().size() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " +
                     to_string(loss.shape()));
  grad(loss.id())[0] = 1.0;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& node = nodes_[k];
    if (!node.needs_grad || node.grad.size() == 0) continue;
    if (node.param) {
      auto dst = node.param->grad();
      auto src = node.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    } else if (node.backward) {
      node.backward(*this, k);
    }
  }
  clear();
}

void Graph::clear() {
  nodes_.clear();
  param_ids_.clear();
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
    throw ShapeError("matmul: incompatible shapes " + to_string(A.shape()) + " and " +
                     to_string(B.shape()));
  Tensor out({A.rows(), B.cols()});
  out.mat().noalias() = A.mat() * B.mat();
  return g.record(std::move(out), {a.id(), b.id()}, [](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    const Tensor& dc = g.grad(self);
    if (g.needs_grad(in[0])) g.grad(in[0]).mat().noalias() += dc.mat() * g.value(in[1]).mat().transpose();
    if (g.needs_grad(in[1])) g.grad(in[1]).mat().noalias() += g.value(in[0]).mat().transpose() * dc.mat();
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() != 2) throw ShapeError("transpose: rank-2 tensor expected, got " + to_string(A.shape()));
  Tensor out({A.cols(), A.rows()});
  out.mat() = A.mat().transpose();
  return a.graph().record(std::move(out), {a.id()}, [](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    g.grad(in[0]).mat() += g.grad(self).mat().transpose();
  });
}

Var softmax_rows(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  auto y = out.mat();
  y = X.mat();
  for (Index r = 0; r < y.rows(); ++r) {
    y.row(r).array() -= y.row(r).maxCoeff();
    y.row(r) = y.row(r).array().exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return x.graph().record(std::move(out), {x.id()}, [](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    const auto y = g.value(self).mat();
    const auto dy = g.grad(self).mat();
    auto dx = g.grad(in[0]).mat();
    for (Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(dy.row(r));
      dx.row(r).array() += y.row(r).array() * (dy.row(r).array() - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  auto y = out.mat();
  y = X.mat();
  for (Index r = 0; r < y.rows(); ++r) {
    y.row(r).array() -= y.row(r).maxCoeff();
    y.row(r).array() -= std::log(y.row(r).array().exp().sum());
  }
  return x.graph().record(std::move(out), {x.id()}, [](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    const auto y = g.value(self).mat();
    const auto dy = g.grad(self).mat();
    auto dx = g.grad(in[0]).mat();
    for (Index r = 0; r < y.rows(); ++r) {
      const double total = dy.row(r).sum();
      dx.row(r).array() += dy.row(r).array() - y.row(r).array().exp() * total;
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.size() == 1) return Broadcast::kLeftScalar;
  if (b.size() == 1) return Broadcast::kRightScalar;
  throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                   to_string(b.shape()) + " are not broadcast-compatible");
}

// Adds `src` into the gradient of input `id`, summing when that input was a
// broadcast scalar.
void accumulate(Graph& g, std::size_t id, const Eigen::ArrayXd& src) {
  if (!g.needs_grad(id)) return;
  Tensor& dst = g.grad(id);
  if (dst.size() == 1 && src.size() != 1)
    dst[0] += src.sum();
  else
    arr(dst) += src;
}

// Materializes operand `t` at the broadcast output length.
Eigen::ArrayXd expand(const Tensor& t, Index n) {
  if (t.size() == n) return arr(t);
  return Eigen::ArrayXd::Constant(n, t[0]);
}

Var binary(Var a, Var b, const char* name,
           const std::function<double(double, double)>& f,
           Graph::BackwardFn backward) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Broadcast kind = broadcast_kind(A, B, name);
  Tensor out(kind == Broadcast::kLeftScalar ? B.shape() : A.shape());
  const Index n = out.size();
  for (Index i = 0; i < n; ++i)
    out[i] = f(A.size() == 1 ? A[0] : A[i], B.size() == 1 ? B[0] : B[i]);
  return g.record(std::move(out), {a.id(), b.id()}, std::move(backward));
}

template <typename Forward, typename Derivative>
Var unary(Var x, Forward f, Derivative df) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  for (Index i = 0; i < X.size(); ++i) out[i] = f(X[i]);
  return x.graph().record(std::move(out), {x.id()}, [df](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    const Tensor& X = g.value(in[0]);
    const Tensor& Y = g.value(self);
    const Tensor& dY = g.grad(self);
    Tensor& dX = g.grad(in[0]);
    for (Index i = 0; i < X.size(); ++i) dX[i] += dY[i] * df(X[i], Y[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](Graph& g, std::size_t self) {
                  const auto in = g.inputs(self);
                  const Eigen::ArrayXd d = arr(g.grad(self));
                  accumulate(g, in[0], d);
                  accumulate(g, in[1], d);
                });
}

Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](Graph& g, std::size_t self) {
                  const auto in = g.inputs(self);
                  const Eigen::ArrayXd d = arr(g.grad(self));
                  accumulate(g, in[0], d);
                  accumulate(g, in[1], -d);
                });
}

Var mul(Var a, Var b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](Graph& g, std::size_t self) {
                  const auto in = g.inputs(self);
                  const Eigen::ArrayXd d = arr(g.grad(self));
                  const Index n = d.size();
                  accumulate(g, in[0], d * expand(g.value(in[1]), n));
                  accumulate(g, in[1], d * expand(g.value(in[0]), n));
                });
}

// Ties route the gradient to the left operand.
Var minimum(Var a, Var b) {
  return binary(a, b, "minimum", [](double x, double y) { return std::min(x, y); },
                [](Graph& g, std::size_t self) {
                  const auto in = g.inputs(self);
                  const Eigen::ArrayXd d = arr(g.grad(self));
                  const Index n = d.size();
                  const Eigen::ArrayXd x = expand(g.value(in[0]), n);
                  const Eigen::ArrayXd y = expand(g.value(in[1]), n);
                  const Eigen::ArrayXd left = (x <= y).cast<double>();
                  accumulate(g, in[0], d * left);
                  accumulate(g, in[1], d * (1.0 - left));
                });
}

Var scale(Var x, double factor) {
  return unary(x, [factor](double v) { return factor * v; },
               [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double offset) {
  return unary(x, [offset](double v) { return v + offset; },
               [](double, double) { return 1.0; });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Var log(Var x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  return unary(x, [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

// Gradient is zero outside [lo, hi], matching the flat region of the clip.
Var clamp(Var x, double lo, double hi) {
  if (lo > hi) throw UsageError("clamp: lo > hi");
  return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Structural

Var concat_columns(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.rows() != B.rows())
    throw ShapeError("concat_columns: row counts differ: " + to_string(A.shape()) + " and " +
                     to_string(B.shape()));
  const Index p = A.cols();
  const Index q = B.cols();
  Tensor out({A.rows(), p + q});
  out.mat().leftCols(p) = A.mat();
  out.mat().rightCols(q) = B.mat();
  return g.record(std::move(out), {a.id(), b.id()}, [p, q](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    const auto d = g.grad(self).mat();
    if (g.needs_grad(in[0])) g.grad(in[0]).mat() += d.leftCols(p);
    if (g.needs_grad(in[1])) g.grad(in[1]).mat() += d.rightCols(q);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_rows needs at least one operand");
  Graph& g = parts.front().graph();
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  for (const Var& v : parts) {
    if (&v.graph() != &g) throw UsageError("operands recorded on different graphs");
    if (v.value().rank() != 2 || v.cols() != cols)
      throw ShapeError("concat_rows: column counts differ: " + to_string(v.shape()));
    ids.push_back(v.id());
    offsets.push_back(rows);
    rows += v.rows();
  }
  Tensor out({rows, cols});
  for (std::size_t k = 0; k < parts.size(); ++k)
    out.mat().middleRows(offsets[k], parts[k].rows()) = parts[k].value().mat();
  return g.record(std::move(out), std::move(ids), [offsets = std::move(offsets)](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    const auto d = g.grad(self).mat();
    for (std::size_t k = 0; k < in.size(); ++k) {
      if (!g.needs_grad(in[k])) continue;
      Tensor& dst = g.grad(in[k]);
      dst.mat() += d.middleRows(offsets[k], dst.rows());
    }
  });
}

Var reduce(Var x, Index axis, ReduceKind kind) {
  const Tensor& X = x.value();
  const Shape& shape = X.shape();
  if (axis < 0 || axis >= X.rank())
    throw ShapeError("reduce: axis " + std::to_string(axis) + " invalid for shape " +
                     to_string(shape));
  // View as [outer, extent, inner] and reduce the middle axis.
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= shape[i];
  for (Index i = axis + 1; i < X.rank(); ++i) inner *= shape[i];
  const Index extent = shape[axis];
  Shape out_shape;
  for (Index i = 0; i < X.rank(); ++i)
    if (i != axis) out_shape.push_back(shape[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  const double norm = (kind == ReduceKind::kMean && extent > 0) ? 1.0 / extent : 1.0;

  Tensor out(out_shape);
  for (Index o = 0; o < outer; ++o)
    for (Index e = 0; e < extent; ++e)
      for (Index i = 0; i < inner; ++i) out[o * inner + i] += X[(o * extent + e) * inner + i];
  if (norm != 1.0) arr(out) *= norm;

  return x.graph().record(
      std::move(out), {x.id()}, [outer, extent, inner, norm](Graph& g, std::size_t self) {
        const auto in = g.inputs(self);
        const Tensor& dy = g.grad(self);
        Tensor& dx = g.grad(in[0]);
        for (Index o = 0; o < outer; ++o)
          for (Index e = 0; e < extent; ++e)
            for (Index i = 0; i < inner; ++i) dx[(o * extent + e) * inner + i] += norm * dy[o * inner + i];
      });
}

Var sum_all(Var x) {
  Var flat = x;
  while (flat.value().rank() > 1) flat = reduce(flat, 0, ReduceKind::kSum);
  return reduce(flat, 0, ReduceKind::kSum);
}

Var mean_all(Var x) {
  const Index n = x.value().size();
  if (n == 0) throw UsageError("mean_all of an empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

Var pick_columns(Var x, std::span<const int> columns) {
  const Tensor& X = x.value();
  if (X.rank() != 2 || static_cast<Index>(columns.size()) != X.rows())
    throw ShapeError("pick_columns: need one column index per row of " + to_string(X.shape()));
  std::vector<int> cols(columns.begin(), columns.end());
  Tensor out({X.rows()});
  for (Index r = 0; r < X.rows(); ++r) {
    if (cols[r] < 0 || cols[r] >= X.cols())
      throw ShapeError("pick_columns: column " + std::to_string(cols[r]) + " out of range");
    out[r] = X.at(r, cols[r]);
  }
  return x.graph().record(std::move(out), {x.id()}, [cols = std::move(cols)](Graph& g, std::size_t self) {
    const auto in = g.inputs(self);
    const Tensor& dy = g.grad(self);
    Tensor& dx = g.grad(in[0]);
    const Index n_cols = dx.cols();
    for (std::size_t r = 0; r < cols.size(); ++r) dx[static_cast<Index>(r) * n_cols + cols[r]] += dy[static_cast<Index>(r)];
  });
}

Var grouped_attention(Var q, Var k, Var v, Index group, double scale) {
  Graph& g = same_graph(q, k);
  same_graph(q, v);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  if (Q.rank() != 2 || K.rank() != 2 || V.rank() != 2 || Q.rows() != K.rows() || Q.rows() != V.rows() ||
      Q.cols() != K.cols())
    throw ShapeError("grouped_attention: incompatible shapes " + to_string(Q.shape()) + ", " +
                     to_string(K.shape()) + ", " + to_string(V.shape()));
  if (group < 1 || Q.rows() % group != 0)
    throw ShapeError("grouped_attention: " + std::to_string(Q.rows()) + " rows do not split into groups of " +
                     std::to_string(group));
  const Index blocks = Q.rows() / group;
  Tensor weights({Q.rows(), group});
  Tensor out({Q.rows(), V.cols()});
  auto w = weights.mat();
  for (Index b = 0; b < blocks; ++b) {
    const Index r0 = b * group;
    auto wb = w.middleRows(r0, group);
    wb.noalias() = scale * Q.mat().middleRows(r0, group) * K.mat().middleRows(r0, group).transpose();
    for (Index r = 0; r < group; ++r) {
      wb.row(r).array() -= wb.row(r).maxCoeff();
      wb.row(r) = wb.row(r).array().exp().matrix();
      wb.row(r) /= wb.row(r).sum();
    }
    out.mat().middleRows(r0, group).noalias() = wb * V.mat().middleRows(r0, group);
  }
  return g.record(std::move(out), {q.id(), k.id(), v.id()},
                  [weights = std::move(weights), group, scale](Graph& g, std::size_t self) {
                    const auto in = g.inputs(self);
                    const auto dy = g.grad(self).mat();
                    const auto Qm = g.value(in[0]).mat();
                    const auto Km = g.value(in[1]).mat();
                    const auto Vm = g.value(in[2]).mat();
                    const auto w = weights.mat();
                    MatrixXdr ds(group, group);
                    for (Index r0 = 0; r0 < w.rows(); r0 += group) {
                      const auto wb = w.middleRows(r0, group);
                      const auto dyb = dy.middleRows(r0, group);
                      if (g.needs_grad(in[2]))
                        g.grad(in[2]).mat().middleRows(r0, group).noalias() += wb.transpose() * dyb;
                      ds.noalias() = dyb * Vm.middleRows(r0, group).transpose();
                      for (Index r = 0; r < group; ++r) {
                        const double dot = ds.row(r).dot(wb.row(r));
                        ds.row(r).array() = wb.row(r).array() * (ds.row(r).array() - dot);
                      }
                      ds *= scale;
                      if (g.needs_grad(in[0]))
                        g.grad(in[0]).mat().middleRows(r0, group).noalias() += ds * Km.middleRows(r0, group);
                      if (g.needs_grad(in[1]))
                        g.grad(in[1]).mat().middleRows(r0, group).noalias() +=
                            ds.transpose() * Qm.middleRows(r0, group);
                    }
                  });
}

}  // namespace matl
