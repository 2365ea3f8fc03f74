// SPDX-License-Identifier: Apache-2.0
#include "kunbr/gradbackend/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include <Eigen/Core>

#include "kunbr/gradbackend/error.hpp"

namespace kunbr::ad {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

Var Graph::leaf(Tensor value, bool requires_grad, std::string_view name) {
  if (!value.all_finite()) {
    throw NumericError(fmt::format("non-finite value in leaf '{}'", name));
  }
  nodes_.push_back(Node{std::string(name), std::move(value), Tensor{}, requires_grad, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  const std::size_t id = nodes_.size();
  if (!value.all_finite()) {
    throw NumericError(fmt::format("non-finite value produced by op '{}' (node {})", op, id));
  }
  bool needs_grad = false;
  for (const Var& v : inputs) {
    if (&v.graph() != this) throw ValidationError(fmt::format("op '{}' mixes graphs", op));
    needs_grad = needs_grad || v.requires_grad();
  }
  nodes_.push_back(Node{std::string(op), std::move(value), Tensor{}, needs_grad,
                        needs_grad ? std::move(backward) : Backward{}});
  return Var(this, id);
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Graph::backward(Var root) {
  if (root.value().size() != 1) {
    throw ShapeError(fmt::format("backward() needs a single-element root, got shape {}",
                                 shape_string(root.shape())));
  }
  for (auto& node : nodes_) node.grad = Tensor{};
  if (!root.requires_grad()) return;
  grad_buffer(root.id()).fill(1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.value, node.grad);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& node = nodes_[v.id()];
  return node.grad.empty() ? Tensor(node.value.shape(), 0.0) : node.grad;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank, std::string_view operand) {
  if (t.rank() != rank) {
    throw ShapeError(fmt::format("{}: operand {} must have rank {}, got shape {}", op, operand, rank,
                                 shape_string(t.shape())));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("matmul", bv, 2, "b");
  if (av.rank() < 2) {
    throw ShapeError(fmt::format("matmul: operand a must have rank >= 2, got shape {}", shape_string(av.shape())));
  }
  const std::size_t k = last_dim(av);
  if (bv.dim(0) != k) {
    throw ShapeError(fmt::format("matmul: inner dimensions differ, a {} vs b {}", shape_string(av.shape()),
                                 shape_string(bv.shape())));
  }
  const std::size_t n = bv.dim(1);
  const std::size_t rows = av.size() / k;
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  MatrixMap(out.ptr(), rows, n).noalias() = ConstMatrixMap(av.ptr(), rows, k) * ConstMatrixMap(bv.ptr(), k, n);

  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("matmul", std::move(out), {a, b}, [ia, ib, rows, k, n](Graph& g, const Tensor&, const Tensor& go) {
    ConstMatrixMap dout(go.ptr(), rows, n);
    if (g.requires_grad(ia)) {
      MatrixMap(g.grad_buffer(ia).ptr(), rows, k).noalias() += dout * ConstMatrixMap(g.value(ib).ptr(), k, n).transpose();
    }
    if (g.requires_grad(ib)) {
      MatrixMap(g.grad_buffer(ib).ptr(), k, n).noalias() += ConstMatrixMap(g.value(ia).ptr(), rows, k).transpose() * dout;
    }
  });
}

Var bmm(Var a, Var b, bool transpose_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("bmm", av, 3, "a");
  require_rank("bmm", bv, 3, "b");
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bv.dim(0) != batch || bk != k) {
    throw ShapeError(fmt::format("bmm: incompatible operands a {} and b {} (transpose_b={})", shape_string(av.shape()),
                                 shape_string(bv.shape()), transpose_b));
  }
  Tensor out({batch, m, n});
  // Index helpers: b element (p, q) of the logical [k, n] operand.
  auto b_index = [=](std::size_t s, std::size_t p, std::size_t q) {
    return transpose_b ? s * n * k + q * k + p : s * k * n + p * n + q;
  };
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += av[s * m * k + i * k + p] * bv[b_index(s, p, j)];
        out[s * m * n + i * n + j] = acc;
      }
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("bmm", std::move(out), {a, b}, [=](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& A = g.value(ia);
    const Tensor& B = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& da = g.grad_buffer(ia);
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += go[s * m * n + i * n + j] * B[b_index(s, p, j)];
            da[s * m * k + i * k + p] += acc;
          }
    }
    if (g.requires_grad(ib)) {
      Tensor& db = g.grad_buffer(ib);
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += A[s * m * k + i * k + p] * go[s * m * n + i * n + j];
            db[b_index(s, p, j)] += acc;
          }
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("add", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor&, const Tensor& go) {
    for (std::size_t id : {ia, ib}) {
      if (!g.requires_grad(id)) continue;
      Tensor& d = g.grad_buffer(id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("mul", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor&, const Tensor& go) {
    if (g.requires_grad(ia)) {
      Tensor& d = g.grad_buffer(ia);
      const Tensor& other = g.value(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * other[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& d = g.grad_buffer(ib);
      const Tensor& other = g.value(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * other[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.graph().record("scale", std::move(out), {a}, [ia, factor](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * factor;
  });
}

Var add_bias(Var a, Var bias) {
  const Tensor& bv = bias.value();
  require_rank("add_bias", bv, 1, "bias");
  const std::size_t n = last_dim(a.value());
  if (bv.dim(0) != n) {
    throw ShapeError(fmt::format("add_bias: bias {} does not match last axis of {}", shape_string(bv.shape()),
                                 shape_string(a.shape())));
  }
  Tensor out = a.value();
  const std::size_t rows = out.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.graph().record("add_bias", std::move(out), {a, bias}, [=](Graph& g, const Tensor&, const Tensor& go) {
    if (g.requires_grad(ia)) {
      Tensor& d = g.grad_buffer(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& d = g.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) d[j] += go[r * n + j];
    }
  });
}

Var softmax(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = last_dim(av);
  const std::size_t rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.ptr() + r * n;
    double* y = out.ptr() + r * n;
    const double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  const std::size_t ia = a.id();
  return a.graph().record("softmax", std::move(out), {a}, [=](Graph& g, const Tensor& y, const Tensor& go) {
    Tensor& d = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += go[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[r * n + j] * (go[r * n + j] - dot);
    }
  });
}

Var log_softmax(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = last_dim(av);
  const std::size_t rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.ptr() + r * n;
    double* y = out.ptr() + r * n;
    const double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(x[j] - mx);
    const double log_total = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - log_total;
  }
  const std::size_t ia = a.id();
  return a.graph().record("log_softmax", std::move(out), {a}, [=](Graph& g, const Tensor& y, const Tensor& go) {
    Tensor& d = g.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += go[r * n + j];
      for (std::size_t j = 0; j < n; ++j) d[r * n + j] += go[r * n + j] - std::exp(y[r * n + j]) * total;
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double epsilon) {
  const Tensor& xv = x.value();
  const std::size_t n = last_dim(xv);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  if (gv.shape() != Shape{n} || bv.shape() != Shape{n}) {
    throw ShapeError(fmt::format("layer_norm: gamma {} / beta {} must be [{}] for input {}", shape_string(gv.shape()),
                                 shape_string(bv.shape()), n, shape_string(xv.shape())));
  }
  const std::size_t rows = xv.size() / n;
  Tensor normalized(xv.shape());
  std::vector<double> rstd(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * rstd[r];
      normalized[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [=, normalized = std::move(normalized), rstd = std::move(rstd)](Graph& g, const Tensor&, const Tensor& go) {
        const Tensor& gam = g.value(ig);
        if (g.requires_grad(ig)) {
          Tensor& dg = g.grad_buffer(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) dg[j] += go[r * n + j] * normalized[r * n + j];
        }
        if (g.requires_grad(ib)) {
          Tensor& db = g.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) db[j] += go[r * n + j];
        }
        if (g.requires_grad(ix)) {
          Tensor& dx = g.grad_buffer(ix);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = go[r * n + j] * gam[j];
              mean_dh += dh;
              mean_dh_h += dh * normalized[r * n + j];
            }
            mean_dh *= inv_n;
            mean_dh_h *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = go[r * n + j] * gam[j];
              dx[r * n + j] += rstd[r] * (dh - mean_dh - normalized[r * n + j] * mean_dh_h);
            }
          }
        }
      });
}

Var embedding(Var table, std::span<const int> ids, const Shape& out_prefix) {
  const Tensor& tv = table.value();
  require_rank("embedding", tv, 2, "table");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  if (shape_size(out_prefix) != ids.size()) {
    throw ShapeError(fmt::format("embedding: {} ids do not fill prefix shape {}", ids.size(), shape_string(out_prefix)));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ValidationError(fmt::format("embedding: id {} at position {} outside table of {} rows", ids[i], i, vocab));
    }
  }
  Shape shape = out_prefix;
  shape.push_back(d);
  Tensor out(shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.ptr() + i * d);
  }
  const std::size_t it = table.id();
  return table.graph().record("embedding", std::move(out), {table},
                              [=, ids = std::vector<int>(ids.begin(), ids.end())](Graph& g, const Tensor&, const Tensor& go) {
                                Tensor& dt = g.grad_buffer(it);
                                for (std::size_t i = 0; i < ids.size(); ++i) {
                                  double* row = dt.ptr() + static_cast<std::size_t>(ids[i]) * d;
                                  for (std::size_t j = 0; j < d; ++j) row[j] += go[i * d + j];
                                }
                              });
}

Var causal_mask(Var scores) {
  const Tensor& sv = scores.value();
  require_rank("causal_mask", sv, 3, "scores");
  const std::size_t batch = sv.dim(0), tq = sv.dim(1), tk = sv.dim(2);
  if (tq != tk) {
    throw ShapeError(fmt::format("causal_mask: scores must be square in the last two axes, got {}", shape_string(sv.shape())));
  }
  Tensor out = sv;
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = i + 1; j < tk; ++j) out[(s * tq + i) * tk + j] = kMaskedScore;
  const std::size_t is = scores.id();
  return scores.graph().record("causal_mask", std::move(out), {scores}, [=](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& d = g.grad_buffer(is);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t i = 0; i < tq; ++i)
        for (std::size_t j = 0; j <= i; ++j) d[(s * tq + i) * tk + j] += go[(s * tq + i) * tk + j];
  });
}

Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double kA = 0.044715;
  Tensor out = a.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  const std::size_t ia = a.id();
  return a.graph().record("gelu", std::move(out), {a}, [=](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& x = g.value(ia);
    Tensor& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = x[i];
      const double t = std::tanh(kC * (v + kA * v * v * v));
      const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      d[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Var split_heads(Var x, std::size_t heads) {
  const Tensor& xv = x.value();
  require_rank("split_heads", xv, 3, "x");
  const std::size_t batch = xv.dim(0), len = xv.dim(1), width = xv.dim(2);
  if (heads == 0 || width % heads != 0) {
    throw ShapeError(fmt::format("split_heads: width {} not divisible by {} heads", width, heads));
  }
  const std::size_t dh = width / heads;
  Tensor out({batch * heads, len, dh});
  auto src = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t j) { return (b * len + t) * width + h * dh + j; };
  auto dst = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t j) { return ((b * heads + h) * len + t) * dh + j; };
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t j = 0; j < dh; ++j) out[dst(b, h, t, j)] = xv[src(b, h, t, j)];
  const std::size_t ix = x.id();
  return x.graph().record("split_heads", std::move(out), {x}, [=](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& d = g.grad_buffer(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t j = 0; j < dh; ++j) d[src(b, h, t, j)] += go[dst(b, h, t, j)];
  });
}

Var merge_heads(Var x, std::size_t heads) {
  const Tensor& xv = x.value();
  require_rank("merge_heads", xv, 3, "x");
  if (heads == 0 || xv.dim(0) % heads != 0) {
    throw ShapeError(fmt::format("merge_heads: leading axis {} not divisible by {} heads", xv.dim(0), heads));
  }
  const std::size_t batch = xv.dim(0) / heads, len = xv.dim(1), dh = xv.dim(2), width = dh * heads;
  Tensor out({batch, len, width});
  auto src = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t j) { return ((b * heads + h) * len + t) * dh + j; };
  auto dst = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t j) { return (b * len + t) * width + h * dh + j; };
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t j = 0; j < dh; ++j) out[dst(b, h, t, j)] = xv[src(b, h, t, j)];
  const std::size_t ix = x.id();
  return x.graph().record("merge_heads", std::move(out), {x}, [=](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& d = g.grad_buffer(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t j = 0; j < dh; ++j) d[src(b, h, t, j)] += go[dst(b, h, t, j)];
  });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  const std::size_t d = last_dim(xv);
  const std::size_t total = xv.size() / d;
  if (rows.empty()) throw ShapeError("select_rows: empty row list");
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= total) {
      throw ShapeError(fmt::format("select_rows: row {} out of range for {} rows", rows[r], total));
    }
    std::copy_n(xv.ptr() + rows[r] * d, d, out.ptr() + r * d);
  }
  const std::size_t ix = x.id();
  return x.graph().record("select_rows", std::move(out), {x},
                          [=, rows = std::vector<std::size_t>(rows.begin(), rows.end())](Graph& g, const Tensor&,
                                                                                         const Tensor& go) {
                            Tensor& dx = g.grad_buffer(ix);
                            for (std::size_t r = 0; r < rows.size(); ++r)
                              for (std::size_t j = 0; j < d; ++j) dx[rows[r] * d + j] += go[r * d + j];
                          });
}

Var pick(Var x, std::span<const int> cols) {
  const Tensor& xv = x.value();
  require_rank("pick", xv, 2, "x");
  const std::size_t rows = xv.dim(0), width = xv.dim(1);
  if (cols.size() != rows) {
    throw ShapeError(fmt::format("pick: {} columns given for {} rows", cols.size(), rows));
  }
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= width) {
      throw ShapeError(fmt::format("pick: column {} out of range for width {}", cols[r], width));
    }
    out[r] = xv[r * width + static_cast<std::size_t>(cols[r])];
  }
  const std::size_t ix = x.id();
  return x.graph().record("pick", std::move(out), {x},
                          [=, cols = std::vector<int>(cols.begin(), cols.end())](Graph& g, const Tensor&, const Tensor& go) {
                            Tensor& d = g.grad_buffer(ix);
                            for (std::size_t r = 0; r < rows; ++r) d[r * width + static_cast<std::size_t>(cols[r])] += go[r];
                          });
}

Var segment_sum(Var x, std::span<const std::size_t> owner, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank("segment_sum", xv, 1, "x");
  if (owner.size() != xv.size() || count == 0) {
    throw ShapeError(fmt::format("segment_sum: {} owners for {} values into {} segments", owner.size(), xv.size(), count));
  }
  Tensor out({count});
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (owner[i] >= count) throw ShapeError(fmt::format("segment_sum: owner {} >= {}", owner[i], count));
    out[owner[i]] += xv[i];
  }
  const std::size_t ix = x.id();
  return x.graph().record(
      "segment_sum", std::move(out), {x},
      [=, owner = std::vector<std::size_t>(owner.begin(), owner.end())](Graph& g, const Tensor&, const Tensor& go) {
        Tensor& d = g.grad_buffer(ix);
        for (std::size_t i = 0; i < owner.size(); ++i) d[i] += go[owner[i]];
      });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.graph().record("sum", Tensor::scalar(total), {a}, [=](Graph& g, const Tensor&, const Tensor& go) {
    Tensor& d = g.grad_buffer(ia);
    for (auto& v : d.data()) v += go[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::exp(v);
  const std::size_t ia = a.id();
  return a.graph().record("exp", std::move(out), {a}, [=](Graph& g, const Tensor& y, const Tensor& go) {
    Tensor& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * y[i];
  });
}

Var log(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::log(v);
  const std::size_t ia = a.id();
  return a.graph().record("log", std::move(out), {a}, [=](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& x = g.value(ia);
    Tensor& d = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] / x[i];
  });
}

Var log1m_clamped(Var p, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw ValidationError(fmt::format("log1m_clamped: epsilon {} outside (0, 1)", epsilon));
  }
  const double ceiling = 1.0 - epsilon;
  Tensor out = p.value();
  for (auto& v : out.data()) v = std::log(1.0 - std::min(std::max(v, 0.0), ceiling));
  const std::size_t ip = p.id();
  return p.graph().record("log1m_clamped", std::move(out), {p}, [=](Graph& g, const Tensor&, const Tensor& go) {
    const Tensor& pv = g.value(ip);
    Tensor& d = g.grad_buffer(ip);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (pv[i] < ceiling && pv[i] > 0.0) d[i] += -go[i] / (1.0 - pv[i]);
    }
  });
}

Var squared_distance(Var a, const Tensor& target) {
  require_same_shape("squared_distance", a.value(), target);
  const Tensor& av = a.value();
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - target[i]) * (av[i] - target[i]);
  const std::size_t ia = a.id();
  return a.graph().record("squared_distance", Tensor::scalar(total), {a},
                          [=, target = target](Graph& g, const Tensor&, const Tensor& go) {
                            const Tensor& x = g.value(ia);
                            Tensor& d = g.grad_buffer(ia);
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += 2.0 * (x[i] - target[i]) * go[0];
                          });
}

}  // namespace kunbr::ad
