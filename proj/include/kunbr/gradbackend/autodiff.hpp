// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kunbr/gradbackend/tensor.hpp"

namespace kunbr::ad {

class Graph;

// Handle to a node recorded on a Graph.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep over ids is a valid topological order. Nodes that do not depend on
// any gradient-requiring leaf keep no backward closure.
class Graph {
 public:
  // Receives the node's own output value and the gradient flowing into it.
  using Backward = std::function<void(Graph&, const Tensor& out, const Tensor& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad, std::string_view name = "leaf");
  Var constant(Tensor value) { return leaf(std::move(value), false, "constant"); }

  // Used by primitive ops. Throws NumericError naming `op` if `value`
  // contains a non-finite element.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  // Accumulator for d(root)/d(node); allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id);

  // Runs the reverse sweep from a single-element root.
  void backward(Var root);

  // Gradient after backward(); zeros if the node was not reached.
  Tensor grad(Var v) const;

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Primitive ops. All operate on the last axis where an axis matters.

// a[..., k] x b[k, n] -> [..., n]
Var matmul(Var a, Var b);
// Batched product over the leading axis: a[B, m, k] x b[B, k, n] -> [B, m, n].
// With transpose_b, b is [B, n, k] and is used transposed.
Var bmm(Var a, Var b, bool transpose_b = false);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// a[..., n] + bias[n], broadcast over leading axes.
Var add_bias(Var a, Var bias);

Var softmax(Var a);
Var log_softmax(Var a);

inline constexpr double kLayerNormEpsilon = 1e-5;
// Normalizes each row over the last axis, then applies gamma * x + beta.
Var layer_norm(Var x, Var gamma, Var beta, double epsilon = kLayerNormEpsilon);

// Rows of table[V, d] gathered by ids; result shape is out_prefix + [d].
Var embedding(Var table, std::span<const int> ids, const Shape& out_prefix);

inline constexpr double kMaskedScore = -1e9;
// For scores[B, T, T], replaces entries with key index > query index by a
// large negative finite constant.
Var causal_mask(Var scores);

// tanh approximation.
Var gelu(Var a);

// [B, T, heads * d_head] -> [B * heads, T, d_head] and back.
Var split_heads(Var x, std::size_t heads);
Var merge_heads(Var x, std::size_t heads);

// Treats x as [N, d] (d = last axis) and gathers the listed rows -> [R, d].
Var select_rows(Var x, std::span<const std::size_t> rows);
// x[R, C] -> [R] with out[r] = x[r, cols[r]].
Var pick(Var x, std::span<const int> cols);
// x[R] -> [count], out[s] = sum of x[r] with owner[r] == s.
Var segment_sum(Var x, std::span<const std::size_t> owner, std::size_t count);

Var sum(Var a);
Var mean(Var a);
Var exp(Var a);
Var log(Var a);
// log(1 - min(p, 1 - epsilon)); the clamp has zero derivative when active.
Var log1m_clamped(Var p, double epsilon);
// sum((a - target)^2) with target held constant.
Var squared_distance(Var a, const Tensor& target);

}  // namespace kunbr::ad
