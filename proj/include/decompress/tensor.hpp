#pragma once

// Dense row-major tensors with a small reverse-mode autodiff tape.
//
// A Tensor is a shared handle onto a Node. Operations create a new Node that
// remembers its parents and a backward closure, but only while grad mode is
// enabled and at least one parent requires a gradient. backward() walks the
// recorded graph in reverse topological order and accumulates into grad.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "decompress/errors.hpp"

namespace decompress {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Smallest magnitude accepted as a divisor, sqrt or log operand.
inline constexpr double kNumericFloor = 1e-12;

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }
  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; empty span if nothing has been accumulated.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }

  /// Same values, no graph, no gradient.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(node_->shape, std::vector<U>(node_->data.begin(), node_->data.end()));
  }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
bool needs_graph(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Wraps freshly computed values into a Tensor, attaching the backward closure
/// only when a gradient can flow to one of the parents.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (needs_graph<T>(parents)) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto* p : parents) node.parents.push_back(p->node());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

/// Numpy-style broadcast of two shapes (right aligned, extent 1 stretches).
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

inline std::vector<std::size_t> aligned_strides(const Shape& s, std::size_t rank) {
  std::vector<std::size_t> strides(rank, 0);
  std::size_t step = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t axis = s.size() - 1 - i;
    const std::size_t out_axis = rank - 1 - i;
    strides[out_axis] = s[axis] == 1 ? 0 : step;
    step *= s[axis];
  }
  return strides;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  plan.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    plan.out[rank - 1 - i] = std::max(ea, eb);
  }
  plan.stride_a = aligned_strides(a, rank);
  plan.stride_b = aligned_strides(b, rank);
  return plan;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t total = shape_numel(plan.out);
  if (plan.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = plan.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, ia, ib);
    for (std::size_t axis = rank; axis-- > 0;) {
      ++idx[axis];
      ia += plan.stride_a[axis];
      ib += plan.stride_b[axis];
      if (idx[axis] < plan.out[axis]) break;
      ia -= plan.stride_a[axis] * idx[axis];
      ib -= plan.stride_b[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
}

// da and db give the local partial derivatives at (a, b, out).
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(shape_numel(plan.out));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = fwd(av[ia], bv[ib]);
  });
  Shape out_shape = plan.out;
  return make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                        [plan = std::move(plan), da, db](Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          const auto& g = self.grad;
                          std::span<T> ga, gb;
                          if (pa.requires_grad) ga = pa.grad_buffer();
                          if (pb.requires_grad) gb = pb.grad_buffer();
                          for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                            const T x = pa.data[ia], y = pb.data[ib], z = self.data[i];
                            if (!ga.empty()) ga[ia] += g[i] * da(x, y, z);
                            if (!gb.empty()) gb[ib] += g[i] * db(x, y, z);
                          });
                        });
}

// df gives the local derivative at (x, y).
template <typename T, typename Fwd, typename Df>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Df df) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    auto& px = *self.parents[0];
    auto gx = px.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(px.data[i], self.data[i]);
  });
}

template <typename T>
T stable_softplus(T x) {
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

inline void guard_positive(double v, const char* op) {
  if (!(v >= kNumericFloor)) {
    std::ostringstream os;
    os << op << ": operand " << v << " below numeric floor " << kNumericFloor;
    throw NumericGuardError(os.str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : b.data()) detail::guard_positive(std::abs(static_cast<double>(v)), "div");
  return detail::binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T{1} / y; },
      [](T, T y, T z) { return -z / y; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary_op(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary_op(
      x, [offset](T v) { return v + offset; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) { return scale(x, T{-1}); }

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (T v : x.data()) detail::guard_positive(static_cast<double>(v), "sqrt");
  return detail::unary_op(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return detail::stable_sigmoid(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return detail::stable_softplus(v); },
      [](T v, T) { return detail::stable_sigmoid(v); });
}

template <typename T>
Tensor<T> log2(const Tensor<T>& x) {
  for (T v : x.data()) detail::guard_positive(static_cast<double>(v), "log2");
  return detail::unary_op(
      x, [](T v) { return std::log2(v); },
      [](T v, T) { return T{1} / (v * std::numbers::ln2_v<T>); });
}

/// max(x, floor); the gradient passes where x >= floor and is zero below.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor) {
  return detail::unary_op(
      x, [floor](T v) { return v < floor ? floor : v; },
      [floor](T v, T) { return v < floor ? T{0} : T{1}; });
}

/// Same values under a new shape with equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {&x}, [](Node<T>& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("reduce_sum of empty tensor");
  T total{0};
  for (T v : x.data()) total += v;
  return detail::make_result<T>(Shape{}, {total}, {&x}, [](Node<T>& self) {
    auto gx = self.parents[0]->grad_buffer();
    const T g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("reduce_mean of empty tensor");
  const T n = static_cast<T>(x.numel());
  T total{0};
  for (T v : x.data()) total += v;
  return detail::make_result<T>(Shape{}, {total / n}, {&x}, [n](Node<T>& self) {
    auto gx = self.parents[0]->grad_buffer();
    const T g = self.grad[0] / n;
    for (auto& v : gx) v += g;
  });
}

// ---------------------------------------------------------------------------
// Reverse pass.

/// Accumulates d(loss)/d(t) into every reachable tensor that requires a
/// gradient. Gradients of intermediate nodes are reset first, so calling
/// backward twice on the same loss doubles only the leaf gradients.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order)
    if (!node->is_leaf()) node->grad.assign(node->data.size(), T{0});
  loss.node()->grad_buffer()[0] += T{1};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->is_leaf()) node->backward_fn(*node);
  }
}

}  // namespace decompress
