#pragma once

// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared Node. Operations record their
// inputs and a backward closure on the output node whenever any input
// requires a gradient; backward() then walks the recorded graph in reverse
// topological order exactly once.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "psp/error.hpp"
#include "psp/gemm.hpp"

namespace psp {

template <typename T>
class Tensor;

namespace detail {

/// Receives the output gradient and one span per input. A span is empty when
/// that input does not require a gradient; otherwise it must be accumulated
/// into (never overwritten), since an input may feed several consumers.
template <typename T>
using BackwardFn = std::function<void(std::span<const T>, std::span<const std::span<T>>)>;

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  // Leaf holds gradients from a backward pass that have not been zeroed yet.
  bool grad_pending = false;
  // Non-leaf whose graph was consumed by a backward pass.
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;
  const char* op = "leaf";
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->storage = std::make_shared<std::vector<T>>(std::move(values));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto count = static_cast<std::size_t>(shape_numel(shape));
    return from_data(std::move(shape), std::vector<T>(count, value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->storage->size(); }

  std::span<T> data() & { return {node_->storage->data(), node_->storage->size()}; }
  std::span<const T> data() const& { return {node_->storage->data(), node_->storage->size()}; }
  // A span into a temporary's storage would dangle once the handle dies.
  std::span<const T> data() const&& = delete;
  std::vector<T> to_vector() const { return *node_->storage; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return (*node_->storage)[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  void set_requires_grad(bool on) {
    if (!node_->leaf) throw std::logic_error("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  std::span<T> mutable_grad() { return {node_->grad.data(), node_->grad.size()}; }

  /// Clears accumulated gradients so the next backward pass may write them.
  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    node_->grad_pending = false;
  }

  /// Leaf alias sharing storage but excluded from differentiation.
  Tensor detach() const {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = node_->shape;
    n->storage = node_->storage;
    return Tensor(std::move(n));
  }

  /// Deep copy of values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return from_data(shape(), *node_->storage, requires_grad);
  }

  void backward();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Records an operation result. If no input requires a gradient the result is
/// a plain leaf and nothing is retained.
template <typename T>
Tensor<T> record_op(const char* name, Shape shape, std::vector<T> values,
                    const std::vector<Tensor<T>>& inputs, detail::BackwardFn<T> backward) {
  auto out = Tensor<T>::from_data(std::move(shape), std::move(values));
#ifndef NDEBUG
  bool finite_in = std::all_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) {
    auto d = t.data();
    return std::all_of(d.begin(), d.end(), [](T v) { return std::isfinite(v); });
  });
  if (finite_in) {
    for (T v : out.data()) {
      if (std::isnan(v)) throw std::logic_error(std::string("NaN produced by ") + name);
    }
  }
#endif
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor<T>& t) { return t.requires_grad(); });
  auto& n = *out.node();
  n.op = name;
  if (!any) return out;
  n.requires_grad = true;
  n.leaf = false;
  n.backward = std::move(backward);
  n.inputs.reserve(inputs.size());
  for (const auto& t : inputs) n.inputs.push_back(t.node());
  return out;
}

template <typename T>
void Tensor<T>::backward() {
  using N = detail::Node<T>;
  if (numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (node_->released) throw std::logic_error("backward called twice on the same graph");
  if (!node_->requires_grad) throw std::logic_error("loss does not depend on any gradient tensor");

  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<N*> order;
  std::unordered_set<N*> visited;
  std::vector<std::pair<N*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (next < cur->inputs.size()) {
      N* child = cur->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        if (child->released) throw std::logic_error("graph segment already consumed by backward");
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }

  for (N* n : order) {
    if (n->leaf && n->grad_pending) {
      throw std::logic_error("gradients not zeroed since the previous backward; call zero_grad()");
    }
  }
  for (N* n : order) {
    if (n->grad.size() != n->storage->size()) {
      n->grad.assign(n->storage->size(), T(0));
    } else if (!n->leaf) {
      std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
  }
  node_->grad[0] = T(1);

  std::vector<std::span<T>> gin;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* n = *it;
    if (n->leaf) continue;
    gin.clear();
    for (auto& in : n->inputs) {
      if (in->requires_grad) {
        gin.emplace_back(in->grad.data(), in->grad.size());
      } else {
        gin.emplace_back();
      }
    }
    n->backward(std::span<const T>(n->grad.data(), n->grad.size()),
                std::span<const std::span<T>>(gin.data(), gin.size()));
  }

  for (N* n : order) {
    if (n->leaf) {
      n->grad_pending = true;
    } else {
      n->released = true;
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->inputs.clear();
      n->backward = nullptr;
    }
  }
}

namespace detail {

// Broadcast layout of the right operand: element i of `a` pairs with element
// (i / inner) % count of `b`.
struct Broadcast {
  std::int64_t inner = 1;
  std::int64_t count = 1;
};

inline Broadcast broadcast_layout(const Shape& a, const Shape& b, const char* op) {
  auto na = shape_numel(a);
  auto nb = shape_numel(b);
  if (a == b) return {1, na};
  if (nb == 1) return {1, 1};
  if (a.size() == 4 && b.size() == 1 && b[0] == a[1]) return {a[2] * a[3], b[0]};
  if (b.size() < a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return {1, nb};
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " +
                   shape_str(a));
}

template <typename T, typename F, typename GA, typename GB>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, GA dfa, GB dfb) {
  auto bl = broadcast_layout(a.shape(), b.shape(), name);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    out[i] = f(ad[i], bd[(static_cast<std::int64_t>(i) / bl.inner) % bl.count]);
  }
  auto an = a.node();
  auto bn = b.node();
  return record_op<T>(name, a.shape(), std::move(out), {a, b},
                      [an, bn, bl, dfa, dfb](std::span<const T> g, std::span<const std::span<T>> gi) {
                        const auto& av = *an->storage;
                        const auto& bv = *bn->storage;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          auto j = (static_cast<std::int64_t>(i) / bl.inner) % bl.count;
                          if (!gi[0].empty()) gi[0][i] += g[i] * dfa(av[i], bv[j]);
                          if (!gi[1].empty()) gi[1][j] += g[i] * dfb(av[i], bv[j]);
                        }
                      });
}

}  // namespace detail

/// Elementwise a + b. `b` may be a scalar, a per-channel [C] vector against
/// an N x C x H x W tensor, or match a trailing block of a's shape.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * s;
  return record_op<T>("scale", a.shape(), std::move(out), {a},
                      [s](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * s;
                      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  return record_op<T>("sum", {}, {static_cast<T>(acc)}, {a},
                      [](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (auto& v : gi[0]) v += g[0];
                      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto n = static_cast<double>(a.numel());
  return record_op<T>("mean", {}, {static_cast<T>(acc / n)}, {a},
                      [n](std::span<const T> g, std::span<const std::span<T>> gi) {
                        T share = static_cast<T>(static_cast<double>(g[0]) / n);
                        for (auto& v : gi[0]) v += share;
                      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  auto an = a.node();
  auto bn = b.node();
  return record_op<T>("matmul", {m, n}, std::move(out), {a, b},
                      [an, bn, m, n, k](std::span<const T> g, std::span<const std::span<T>> gi) {
                        if (!gi[0].empty()) {
                          detail::gemm<T>(false, true, m, k, n, g.data(), bn->storage->data(),
                                          gi[0].data(), true);
                        }
                        if (!gi[1].empty()) {
                          detail::gemm<T>(true, false, k, n, m, an->storage->data(), g.data(),
                                          gi[1].data(), true);
                        }
                      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto xn = x.node();
  return record_op<T>("relu", x.shape(), std::move(out), {x},
                      [xn](std::span<const T> g, std::span<const std::span<T>> gi) {
                        const auto& xv = *xn->storage;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (xv[i] > T(0)) gi[0][i] += g[i];
                        }
                      });
}

/// Same values under a new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return record_op<T>("reshape", std::move(shape), x.to_vector(), {x},
                      [](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                      });
}

/// Converts values between precisions; the result is a detached leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  auto d = x.data();
  return Tensor<To>::from_data(x.shape(), std::vector<To>(d.begin(), d.end()));
}

}  // namespace psp
