#pragma once

// Reverse-mode automatic differentiation over Tensor<Scalar>.
//
// A Var is a handle to a graph node. Ops are free functions that build new
// nodes; when gradient recording is enabled and any input requires a
// gradient, the result records its parents and a backward rule. backward()
// walks the graph in reverse topological order and accumulates into .grad.

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mdlm/tensor.hpp"

namespace mdlm {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& strict_mode_flag() {
  thread_local bool enabled = false;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// In strict mode every op raises NumericError on a non-finite result.
class StrictModeGuard {
 public:
  explicit StrictModeGuard(bool enable = true) : previous_(detail::strict_mode_flag()) {
    detail::strict_mode_flag() = enable;
  }
  ~StrictModeGuard() { detail::strict_mode_flag() = previous_; }
  StrictModeGuard(const StrictModeGuard&) = delete;
  StrictModeGuard& operator=(const StrictModeGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool has_grad = false;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents.
  std::function<void(Node&)> backward;

  void accumulate_grad(const Tensor<Scalar>& g) {
    if (g.shape() != value.shape()) {
      throw ShapeError(std::string("gradient shape ") + shape_string(g.shape()) +
                       " does not match value shape " + shape_string(value.shape()) +
                       " in op " + op);
    }
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad.data() += g.data();
    }
  }
  void accumulate_grad(Tensor<Scalar>&& g) {
    if (!has_grad && g.shape() == value.shape()) {
      grad = std::move(g);
      has_grad = true;
      return;
    }
    accumulate_grad(static_cast<const Tensor<Scalar>&>(g));
  }
};

template <typename Scalar_>
class Var {
 public:
  using Scalar = Scalar_;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var parameter(Tensor<Scalar> value) { return Var(std::move(value), true); }
  static Var constant(Tensor<Scalar> value) { return Var(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }

  // Gradient, or zeros of the value's shape when none has been accumulated.
  Tensor<Scalar> grad() const {
    return node_->has_grad ? node_->grad : Tensor<Scalar>(node_->value.shape());
  }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = Tensor<Scalar>();
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename Scalar>
void check_finite(const Tensor<Scalar>& value, const char* op) {
  if (strict_mode_flag() && !value.all_finite()) {
    throw NumericError(std::string("non-finite output from op ") + op);
  }
}

// Builds a result node. `rule(out_grad, parents)` receives the node's
// gradient and the parent nodes, and accumulates into the parents.
template <typename Scalar, typename Rule>
Var<Scalar> make_op(const char* op, Tensor<Scalar> value,
                    std::initializer_list<Var<Scalar>> inputs, Rule&& rule) {
  check_finite(value, op);
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = [rule = std::forward<Rule>(rule)](Node<Scalar>& self) {
      rule(self.grad, self.parents);
    };
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
inline bool wants(const std::shared_ptr<Node<Scalar>>& n) {
  return n && n->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.value().size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate gradients from an earlier pass are stale.
  for (Node<Scalar>* node : order) {
    if (node->backward) {
      node->has_grad = false;
      node->grad = Tensor<Scalar>();
    }
  }
  loss.node()->accumulate_grad(Tensor<Scalar>::Constant(loss.shape(), Scalar(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward && node->has_grad) node->backward(*node);
  }
  // Release interior buffers; leaves keep their gradients.
  for (Node<Scalar>* node : order) {
    if (node->backward) {
      node->has_grad = false;
      node->grad = Tensor<Scalar>();
    }
  }
}

// Gradient of `loss` with respect to each of `wrt`. Previously accumulated
// gradients on `wrt` are cleared first; leaves that do not participate in
// the graph get zeros.
template <typename Scalar>
std::vector<Tensor<Scalar>> gradients(const Var<Scalar>& loss,
                                      std::span<Var<Scalar>> wrt) {
  for (auto& v : wrt) v.zero_grad();
  backward(loss);
  std::vector<Tensor<Scalar>> out;
  out.reserve(wrt.size());
  for (const auto& v : wrt) out.push_back(v.grad());
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting ops

template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& x) {
  return Var<Scalar>::constant(x.value());
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<Scalar> out;
  if (a.shape() == b.shape()) {
    out = Tensor<Scalar>(out_shape, a.value().data() + b.value().data());
  } else if (a.shape() == out_shape) {
    out = a.value();
    const Tensor<Scalar> bb = broadcast_to(b.value(), out_shape);
    out.data() += bb.data();
  } else {
    out = broadcast_to(a.value(), out_shape);
    out.data() += broadcast_to(b.value(), out_shape).data();
  }
  Shape sa = a.shape(), sb = b.shape();
  return detail::make_op<Scalar>(
      "add", std::move(out), {a, b},
      [sa, sb](const Tensor<Scalar>& g, auto& p) {
        if (detail::wants(p[0])) p[0]->accumulate_grad(sum_to(g, sa));
        if (detail::wants(p[1])) p[1]->accumulate_grad(sum_to(g, sb));
      });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<Scalar> out = broadcast_to(a.value(), out_shape);
  out.data() -= broadcast_to(b.value(), out_shape).data();
  Shape sa = a.shape(), sb = b.shape();
  return detail::make_op<Scalar>(
      "sub", std::move(out), {a, b},
      [sa, sb](const Tensor<Scalar>& g, auto& p) {
        if (detail::wants(p[0])) p[0]->accumulate_grad(sum_to(g, sa));
        if (detail::wants(p[1])) {
          Tensor<Scalar> gb = sum_to(g, sb);
          gb.data() = -gb.data();
          p[1]->accumulate_grad(std::move(gb));
        }
      });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<Scalar> av = broadcast_to(a.value(), out_shape);
  Tensor<Scalar> bv = broadcast_to(b.value(), out_shape);
  Tensor<Scalar> out(out_shape, av.data().cwiseProduct(bv.data()));
  Shape sa = a.shape(), sb = b.shape();
  return detail::make_op<Scalar>(
      "mul", std::move(out), {a, b},
      [sa, sb, out_shape, av = std::move(av), bv = std::move(bv)](
          const Tensor<Scalar>& g, auto& p) {
        if (detail::wants(p[0])) {
          p[0]->accumulate_grad(
              sum_to(Tensor<Scalar>(out_shape, g.data().cwiseProduct(bv.data())), sa));
        }
        if (detail::wants(p[1])) {
          p[1]->accumulate_grad(
              sum_to(Tensor<Scalar>(out_shape, g.data().cwiseProduct(av.data())), sb));
        }
      });
}

// Explicit broadcast of `x` to `shape`.
template <typename Scalar>
Var<Scalar> broadcast(const Var<Scalar>& x, const Shape& shape) {
  Shape sx = x.shape();
  return detail::make_op<Scalar>(
      "broadcast", broadcast_to(x.value(), shape), {x},
      [sx](const Tensor<Scalar>& g, auto& p) { p[0]->accumulate_grad(sum_to(g, sx)); });
}

template <typename Scalar>
Var<Scalar> scalar_scale(const Var<Scalar>& x, Scalar s) {
  Tensor<Scalar> out(x.shape(), x.value().data() * s);
  return detail::make_op<Scalar>(
      "scalar_scale", std::move(out), {x}, [s](const Tensor<Scalar>& g, auto& p) {
        p[0]->accumulate_grad(Tensor<Scalar>(g.shape(), g.data() * s));
      });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const auto& xv = x.value().data();
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < xv.size(); ++i) {
    out[i] = Scalar(0.5) * xv[i] * (Scalar(1) + std::erf(xv[i] * inv_sqrt2));
  }
  return detail::make_op<Scalar>(
      "gelu", std::move(out), {x},
      [xv = x.value(), inv_sqrt2](const Tensor<Scalar>& g, auto& p) {
        const Scalar inv_sqrt_2pi =
            Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
        Tensor<Scalar> gx(g.shape());
        for (Index i = 0; i < g.size(); ++i) {
          const Scalar v = xv[i];
          const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
          const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
          gx[i] = g[i] * (cdf + v * pdf);
        }
        p[0]->accumulate_grad(std::move(gx));
      });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Shape sx = x.shape();
  return detail::make_op<Scalar>(
      "reshape", x.value().reshaped(std::move(shape)), {x},
      [sx](const Tensor<Scalar>& g, auto& p) { p[0]->accumulate_grad(g.reshaped(sx)); });
}

namespace detail {
template <typename Scalar>
Tensor<Scalar> permute_values(const Tensor<Scalar>& x, const std::vector<int>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) {
    throw ShapeError("permute axes count " + std::to_string(axes.size()) +
                     " does not match rank of " + shape_string(in));
  }
  std::vector<bool> seen(in.size(), false);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= static_cast<int>(in.size()) || seen[axes[i]]) {
      throw ShapeError("invalid permutation for shape " + shape_string(in));
    }
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  const Shape in_strides = row_major_strides(in);
  Shape gather_strides(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) gather_strides[i] = in_strides[axes[i]];
  Tensor<Scalar> out(out_shape);
  // Reuse the broadcast odometer with explicit strides.
  const Index total = out.size();
  std::vector<Index> counter(out_shape.size(), 0);
  Index offset = 0;
  for (Index linear = 0; linear < total; ++linear) {
    out[linear] = x[offset];
    for (int axis = static_cast<int>(out_shape.size()) - 1; axis >= 0; --axis) {
      if (++counter[axis] < out_shape[axis]) {
        offset += gather_strides[axis];
        break;
      }
      offset -= gather_strides[axis] * (out_shape[axis] - 1);
      counter[axis] = 0;
    }
  }
  return out;
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& x, std::vector<int> axes) {
  std::vector<int> inverse(axes.size());
  Tensor<Scalar> out = detail::permute_values(x.value(), axes);
  for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = static_cast<int>(i);
  return detail::make_op<Scalar>(
      "permute", std::move(out), {x}, [inverse](const Tensor<Scalar>& g, auto& p) {
        p[0]->accumulate_grad(detail::permute_values(g, inverse));
      });
}

// Swaps the last two axes.
template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  if (x.value().rank() < 2) {
    throw ShapeError("transpose requires rank >= 2, got " + shape_string(x.shape()));
  }
  std::vector<int> axes(x.value().rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, std::move(axes));
}

// ---------------------------------------------------------------------------
// Linear algebra

// a: [..., m, k]; b: [k, n] (shared across the batch) or [..., k, n] with the
// same leading extents as a. Result: [..., m, n].
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  using CMap = Eigen::Map<const RowMatrix>;
  using MMap = Eigen::Map<RowMatrix>;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return ShapeError("matmul shape mismatch: " + shape_string(sa) + " x " +
                      shape_string(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const Index m = sa[sa.size() - 2], k = sa.back();
  const Index kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw mismatch();

  if (sb.size() == 2) {
    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
    const Index rows = shape_numel(sa) / k;
    Tensor<Scalar> out(out_shape);
    MMap(out.raw(), rows, n).noalias() =
        CMap(a.value().raw(), rows, k) * CMap(b.value().raw(), k, n);
    return detail::make_op<Scalar>(
        "matmul", std::move(out), {a, b},
        [rows, k, n, av = a.value(), bv = b.value()](const Tensor<Scalar>& g, auto& p) {
          CMap gm(g.raw(), rows, n);
          if (detail::wants(p[0])) {
            Tensor<Scalar> ga(av.shape());
            MMap(ga.raw(), rows, k).noalias() = gm * CMap(bv.raw(), k, n).transpose();
            p[0]->accumulate_grad(std::move(ga));
          }
          if (detail::wants(p[1])) {
            Tensor<Scalar> gb(bv.shape());
            MMap(gb.raw(), k, n).noalias() = CMap(av.raw(), rows, k).transpose() * gm;
            p[1]->accumulate_grad(std::move(gb));
          }
        });
  }

  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw mismatch();
  }
  const Index batch = shape_numel(Shape(sa.begin(), sa.end() - 2));
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  Tensor<Scalar> out(out_shape);
  for (Index i = 0; i < batch; ++i) {
    MMap(out.raw() + i * m * n, m, n).noalias() =
        CMap(a.value().raw() + i * m * k, m, k) * CMap(b.value().raw() + i * k * n, k, n);
  }
  return detail::make_op<Scalar>(
      "batched_matmul", std::move(out), {a, b},
      [batch, m, k, n, av = a.value(), bv = b.value()](const Tensor<Scalar>& g, auto& p) {
        const bool want_a = detail::wants(p[0]), want_b = detail::wants(p[1]);
        Tensor<Scalar> ga(want_a ? av.shape() : Shape{});
        Tensor<Scalar> gb(want_b ? bv.shape() : Shape{});
        for (Index i = 0; i < batch; ++i) {
          CMap gm(g.raw() + i * m * n, m, n);
          if (want_a) {
            MMap(ga.raw() + i * m * k, m, k).noalias() =
                gm * CMap(bv.raw() + i * k * n, k, n).transpose();
          }
          if (want_b) {
            MMap(gb.raw() + i * k * n, k, n).noalias() =
                CMap(av.raw() + i * m * k, m, k).transpose() * gm;
          }
        }
        if (want_a) p[0]->accumulate_grad(std::move(ga));
        if (want_b) p[1]->accumulate_grad(std::move(gb));
      });
}

// ---------------------------------------------------------------------------
// Indexing

// table: [V, D]; ids laid out with `ids_shape`. Result: ids_shape + [D].
template <typename Scalar>
Var<Scalar> embedding_lookup(const Var<Scalar>& table, std::span<const int> ids,
                             Shape ids_shape) {
  if (table.value().rank() != 2) {
    throw ShapeError("embedding table must be rank 2, got " + shape_string(table.shape()));
  }
  if (shape_numel(ids_shape) != static_cast<Index>(ids.size())) {
    throw ShapeError("ids length " + std::to_string(ids.size()) + " does not fit shape " +
                     shape_string(ids_shape));
  }
  const Index vocab = table.shape()[0], width = table.shape()[1];
  Shape out_shape = ids_shape;
  out_shape.push_back(width);
  Tensor<Scalar> out(out_shape);
  auto tm = table.value().matrix();
  auto om = out.matrix();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    om.row(static_cast<Index>(i)) = tm.row(ids[i]);
  }
  return detail::make_op<Scalar>(
      "embedding_lookup", std::move(out), {table},
      [idv = std::vector<int>(ids.begin(), ids.end()), ts = table.shape()](
          const Tensor<Scalar>& g, auto& p) {
        Tensor<Scalar> gt(ts);
        auto gm = g.matrix();
        auto gtm = gt.matrix();
        for (std::size_t i = 0; i < idv.size(); ++i) {
          gtm.row(idv[i]) += gm.row(static_cast<Index>(i));
        }
        p[0]->accumulate_grad(std::move(gt));
      });
}

// x: [..., V]; indices has one entry per row of x. Result has shape [...].
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& x, std::span<const Index> indices) {
  const Index rows = x.value().rows(), cols = x.value().cols();
  if (static_cast<Index>(indices.size()) != rows) {
    throw ShapeError("gather: " + std::to_string(indices.size()) + " indices for " +
                     std::to_string(rows) + " rows of " + shape_string(x.shape()));
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor<Scalar> out(out_shape);
  auto xm = x.value().matrix();
  for (Index r = 0; r < rows; ++r) {
    if (indices[r] < 0 || indices[r] >= cols) {
      throw InputError("gather index " + std::to_string(indices[r]) + " out of range");
    }
    out[r] = xm(r, indices[r]);
  }
  return detail::make_op<Scalar>(
      "gather", std::move(out), {x},
      [idx = std::vector<Index>(indices.begin(), indices.end()), xs = x.shape()](
          const Tensor<Scalar>& g, auto& p) {
        Tensor<Scalar> gx(xs);
        auto gm = gx.matrix();
        for (std::size_t r = 0; r < idx.size(); ++r) gm(static_cast<Index>(r), idx[r]) = g[r];
        p[0]->accumulate_grad(std::move(gx));
      });
}

// ---------------------------------------------------------------------------
// Normalization and reductions (all over the last axis unless noted)

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5)) {
  const Index rows = x.value().rows(), width = x.value().cols();
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    throw ShapeError("layer_norm affine shapes " + shape_string(gamma.shape()) + ", " +
                     shape_string(beta.shape()) + " do not match width of " +
                     shape_string(x.shape()));
  }
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  Tensor<Scalar> normalized(x.shape());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(rows);
  auto xm = x.value().matrix();
  auto nm = normalized.matrix();
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = xm.row(r).mean();
    const Scalar var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    nm.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  Tensor<Scalar> out(x.shape());
  out.matrix() = (nm.array().rowwise() * gamma.value().data().transpose().array())
                     .rowwise() +
                 beta.value().data().transpose().array();
  return detail::make_op<Scalar>(
      "layer_norm", std::move(out), {x, gamma, beta},
      [normalized = std::move(normalized), inv_std = std::move(inv_std),
       gv = gamma.value(), width](const Tensor<Scalar>& g, auto& p) {
        auto gm = g.matrix();
        auto nm = normalized.matrix();
        if (detail::wants(p[1])) {
          Tensor<Scalar> gg(Shape{width});
          gg.data() = gm.cwiseProduct(nm).colwise().sum().transpose();
          p[1]->accumulate_grad(std::move(gg));
        }
        if (detail::wants(p[2])) {
          Tensor<Scalar> gb(Shape{width});
          gb.data() = gm.colwise().sum().transpose();
          p[2]->accumulate_grad(std::move(gb));
        }
        if (detail::wants(p[0])) {
          Tensor<Scalar> gx(g.shape());
          auto gxm = gx.matrix();
          RowMatrix dn = gm.array().rowwise() * gv.data().transpose().array();
          const Scalar w = static_cast<Scalar>(width);
          for (Index r = 0; r < dn.rows(); ++r) {
            const Scalar s1 = dn.row(r).sum();
            const Scalar s2 = dn.row(r).dot(nm.row(r));
            gxm.row(r) = (inv_std[r] / w) *
                         (w * dn.row(r).array() - s1 - nm.row(r).array() * s2);
          }
          p[0]->accumulate_grad(std::move(gx));
        }
      });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  auto xm = x.value().matrix();
  auto om = out.matrix();
  for (Index r = 0; r < xm.rows(); ++r) {
    const Scalar mx = xm.row(r).maxCoeff();
    om.row(r) = (xm.row(r).array() - mx).exp();
    om.row(r) /= om.row(r).sum();
  }
  Tensor<Scalar> y = out;
  return detail::make_op<Scalar>(
      "softmax", std::move(out), {x}, [y = std::move(y)](const Tensor<Scalar>& g, auto& p) {
        Tensor<Scalar> gx(g.shape());
        auto ym = y.matrix();
        auto gm = g.matrix();
        auto gxm = gx.matrix();
        for (Index r = 0; r < ym.rows(); ++r) {
          const Scalar dot = gm.row(r).dot(ym.row(r));
          gxm.row(r) = ym.row(r).array() * (gm.row(r).array() - dot);
        }
        p[0]->accumulate_grad(std::move(gx));
      });
}

// Max-subtracted log-sum-exp formulation.
template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  auto xm = x.value().matrix();
  auto om = out.matrix();
  for (Index r = 0; r < xm.rows(); ++r) {
    const Scalar mx = xm.row(r).maxCoeff();
    const Scalar lse = mx + std::log((xm.row(r).array() - mx).exp().sum());
    om.row(r) = xm.row(r).array() - lse;
  }
  Tensor<Scalar> y = out;
  return detail::make_op<Scalar>(
      "log_softmax", std::move(out), {x}, [y = std::move(y)](const Tensor<Scalar>& g, auto& p) {
        Tensor<Scalar> gx(g.shape());
        auto ym = y.matrix();
        auto gm = g.matrix();
        auto gxm = gx.matrix();
        for (Index r = 0; r < ym.rows(); ++r) {
          gxm.row(r) = gm.row(r).array() - ym.row(r).array().exp() * gm.row(r).sum();
        }
        p[0]->accumulate_grad(std::move(gx));
      });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Shape sx = x.shape();
  return detail::make_op<Scalar>(
      "sum", Tensor<Scalar>::Scalar0(x.value().data().sum()), {x},
      [sx](const Tensor<Scalar>& g, auto& p) {
        p[0]->accumulate_grad(Tensor<Scalar>::Constant(sx, g[0]));
      });
}

// sum(x * mask) / sum(mask), with `mask` a constant weight tensor of x's
// shape. An all-zero mask yields 0.
template <typename Scalar>
Var<Scalar> masked_mean(const Var<Scalar>& x, const Tensor<Scalar>& mask) {
  if (mask.shape() != x.shape()) {
    throw ShapeError("masked_mean mask shape " + shape_string(mask.shape()) +
                     " does not match " + shape_string(x.shape()));
  }
  const Scalar denom = mask.data().sum();
  const Scalar value = denom == Scalar(0) ? Scalar(0) : x.value().data().dot(mask.data()) / denom;
  return detail::make_op<Scalar>(
      "masked_mean", Tensor<Scalar>::Scalar0(value), {x},
      [mask, denom](const Tensor<Scalar>& g, auto& p) {
        Tensor<Scalar> gx(mask.shape());
        if (denom != Scalar(0)) gx.data() = mask.data() * (g[0] / denom);
        p[0]->accumulate_grad(std::move(gx));
      });
}

template <typename Scalar, typename Engine>
Var<Scalar> dropout(const Var<Scalar>& x, Scalar rate, Engine& engine) {
  if (rate <= Scalar(0)) return x;
  Tensor<Scalar> keep(x.shape());
  const Scalar scale = Scalar(1) / (Scalar(1) - rate);
  for (Index i = 0; i < keep.size(); ++i) {
    const double u = static_cast<double>(engine() >> 11) * 0x1.0p-53;
    keep[i] = u >= static_cast<double>(rate) ? scale : Scalar(0);
  }
  return mul(x, Var<Scalar>::constant(std::move(keep)));
}

// Operator sugar for expression-style model code.
template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }

}  // namespace mdlm
