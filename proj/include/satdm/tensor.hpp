#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "satdm/common.hpp"

namespace satdm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Whether new ops record backward closures. Thread-local so parallel
/// inference and training never interfere.
inline bool& grad_recording() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_recording()) { grad_recording() = false; }
  ~NoGradGuard() { grad_recording() = prev; }
};

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, same length as data
  bool requires_grad = false;  // leaf the user wants gradients for
  bool needs_grad = false;     // participates in some gradient path
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  std::size_t size() const { return data.size(); }

  std::span<S> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

template <typename S>
inline void check_finite(const Node<S>& n) {
  if (!finite_check_mode()) return;
  for (const S& v : n.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError(std::string("non-finite value produced by op '") + n.op + "'");
    }
  }
}

}  // namespace detail

template <typename S>
class Tensor {
 public:
  using Node = detail::Node<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }

  static Tensor full(Shape shape, S value) {
    auto node = std::make_shared<Node>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
  }

  static Tensor scalar(S value) { return full({}, value); }

  static Tensor from(std::vector<S> data, Shape shape) {
    if (data.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->data = std::move(data);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
  }

  template <typename Rng>
  static Tensor randn(Rng& rng, Shape shape) {
    auto t = zeros(std::move(shape));
    rng.template fill_normal<S>(t.mutable_data());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<const S> data() const { return node_->data; }
  std::span<S> mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    node_->needs_grad = v || node_->needs_grad;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), S(0)); }

  S item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
  }

  S at(std::size_t i) const { return node_->data[i]; }

  /// Same data, cut out of the autodiff graph.
  Tensor detach() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    node->op = "detach";
    return Tensor(std::move(node));
  }

  Tensor clone() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
  }

  /// Graph introspection (tests + structural invariants).
  const void* id() const { return node_.get(); }
  const char* op_name() const { return node_->op; }
  std::vector<Tensor> parents() const {
    std::vector<Tensor> out;
    out.reserve(node_->parents.size());
    for (const auto& p : node_->parents) out.emplace_back(p);
    return out;
  }

  std::shared_ptr<Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename S>
inline bool any_needs_grad(std::initializer_list<const Tensor<S>*> inputs) {
  if (!grad_recording()) return false;
  for (const auto* t : inputs)
    if (t->node()->needs_grad) return true;
  return false;
}

/// Builds an op result node; records parents and the backward closure only
/// when some input participates in a gradient path and recording is on.
template <typename S, typename Backward>
Tensor<S> make_op(const char* op, Shape shape, std::vector<S> data,
                  std::initializer_list<const Tensor<S>*> inputs, Backward&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (any_needs_grad<S>(inputs)) {
    node->needs_grad = true;
    for (const auto* t : inputs) node->parents.push_back(t->node());
    node->backward_fn = std::forward<Backward>(backward);
  }
  check_finite(*node);
  return Tensor<S>(std::move(node));
}

template <typename S>
inline void accumulate(Node<S>& parent, std::span<const S> contribution) {
  auto g = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

}  // namespace detail

/// Ordered record of the primitive applications reachable from a root,
/// in reverse topological order. Replaying visits each node exactly once
/// and consumes the record.
template <typename S>
class Tape {
 public:
  explicit Tape(const Tensor<S>& root) : root_(root.node()) {
    // Iterative post-order DFS over gradient-relevant nodes.
    std::unordered_set<const void*> visited;
    std::vector<std::pair<std::shared_ptr<detail::Node<S>>, std::size_t>> stack;
    if (!root_->needs_grad) return;
    stack.push_back({root_, 0});
    visited.insert(root_.get());
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      if (next_child < node->parents.size()) {
        auto child = node->parents[next_child++];
        if (child->needs_grad && !visited.count(child.get())) {
          visited.insert(child.get());
          stack.push_back({std::move(child), 0});
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
    // order_ is post-order (children before users); reverse-topological
    // replay walks it back-to-front.
  }

  std::size_t num_nodes() const { return order_.size(); }

  /// Seeds d(root)/d(root) = 1 and replays backward once, then releases
  /// the recorded graph.
  void backward() {
    if (root_->size() != 1) {
      throw ContractError("backward over a non-scalar root of shape " + shape_str(root_->shape));
    }
    if (consumed_) throw ContractError("tape already consumed");
    consumed_ = true;
    root_->ensure_grad()[0] += S(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto& node = **it;
      if (node.backward_fn) node.backward_fn(node);
    }
    for (auto& node : order_) {
      node->backward_fn = nullptr;
      node->parents.clear();
      if (!node->requires_grad) node->grad.clear();
    }
    order_.clear();
  }

 private:
  std::shared_ptr<detail::Node<S>> root_;
  std::vector<std::shared_ptr<detail::Node<S>>> order_;
  bool consumed_ = false;
};

/// Populates grads of every requires_grad leaf with d(loss)/d(leaf).
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Tape<S>(loss).backward();
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
inline void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}
}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<S> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("add", a.shape(), std::move(out), {&a, &b}, [an, bn](auto& self) {
    if (an->needs_grad) detail::accumulate(*an, std::span<const S>(self.grad));
    if (bn->needs_grad) detail::accumulate(*bn, std::span<const S>(self.grad));
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<S> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("sub", a.shape(), std::move(out), {&a, &b}, [an, bn](auto& self) {
    if (an->needs_grad) detail::accumulate(*an, std::span<const S>(self.grad));
    if (bn->needs_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<S> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("mul", a.shape(), std::move(out), {&a, &b}, [an, bn](auto& self) {
    if (an->needs_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (bn->needs_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("div", a, b);
  std::vector<S> out(a.size());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] / db[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("div", a.shape(), std::move(out), {&a, &b}, [an, bn](auto& self) {
    if (an->needs_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bn->data[i];
    }
    if (bn->needs_grad) {
      auto g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const S bv = bn->data[i];
        g[i] -= self.grad[i] * an->data[i] / (bv * bv);
      }
    }
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.size());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + c;
  auto an = a.node();
  return detail::make_op<S>("add_scalar", a.shape(), std::move(out), {&a}, [an](auto& self) {
    if (an->needs_grad) detail::accumulate(*an, std::span<const S>(self.grad));
  });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.size());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * c;
  auto an = a.node();
  return detail::make_op<S>("mul_scalar", a.shape(), std::move(out), {&a}, [an, c](auto& self) {
    if (an->needs_grad) {
      auto g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    }
  });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, S(-1));
}

// ---------------------------------------------------------------------------
// Elementwise functions
// ---------------------------------------------------------------------------

namespace detail {
template <typename S, typename F, typename DF>
Tensor<S> unary_op(const char* name, const Tensor<S>& a, F f, DF df) {
  std::vector<S> out(a.size());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i]);
  auto an = a.node();
  return make_op<S>(name, a.shape(), std::move(out), {&a}, [an, df](auto& self) {
    if (!an->needs_grad) return;
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(an->data[i], self.data[i]);
  });
}

// Vectorized exp with a chunking that depends only on the element count,
// never on buffer addresses: Eigen's own map assignment peels to the runtime
// alignment of the destination, which makes the scalar/packet split (and the
// low bits of a transcendental) vary between allocations — breaking the
// bit-determinism the forward pass guarantees. Plain +-*/ are IEEE-exact in
// both scalar and SIMD form, so only exp needs this treatment.
template <typename S>
void vexp_fixed(const S* x, S* y, std::size_t n) {
  using Packet = typename Eigen::internal::packet_traits<S>::type;
  constexpr std::size_t kPS = Eigen::internal::packet_traits<S>::size;
  std::size_t i = 0;
  if constexpr (kPS > 1) {
    for (; i + kPS <= n; i += kPS) {
      Eigen::internal::pstoreu(y + i,
                               Eigen::internal::pexp(Eigen::internal::ploadu<Packet>(x + i)));
    }
  }
  for (; i < n; ++i) y[i] = std::exp(x[i]);
}
}  // namespace detail

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  std::vector<S> out(a.size());
  detail::vexp_fixed(a.node()->data.data(), out.data(), out.size());
  auto an = a.node();
  return detail::make_op<S>("exp", a.shape(), std::move(out), {&a}, [an](auto& self) {
    if (!an->needs_grad) return;
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return detail::unary_op(
      "log", a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return detail::unary_op(
      "sqrt", a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return detail::unary_op(
      "square", a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  std::vector<S> out(a.size());
  {
    auto xd = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -xd[i];
    detail::vexp_fixed(out.data(), out.data(), out.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = S(1) / (S(1) + out[i]);
  }
  auto an = a.node();
  return detail::make_op<S>("sigmoid", a.shape(), std::move(out), {&a}, [an](auto& self) {
    if (!an->needs_grad) return;
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S y = self.data[i];
      g[i] += self.grad[i] * y * (S(1) - y);
    }
  });
}

/// x * sigmoid(x), the activation used throughout the network.
template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  std::vector<S> out(a.size());
  {
    auto xd = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -xd[i];
    detail::vexp_fixed(out.data(), out.data(), out.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] / (S(1) + out[i]);
  }
  auto an = a.node();
  return detail::make_op<S>("silu", a.shape(), std::move(out), {&a}, [an](auto& self) {
    if (!an->needs_grad) return;
    std::vector<S> e(an->data.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = -an->data[i];
    detail::vexp_fixed(e.data(), e.data(), e.size());
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S s = S(1) / (S(1) + e[i]);
      g[i] += self.grad[i] * s * (S(1) + an->data[i] * (S(1) - s));
    }
  });
}

/// Gradient passes through where lo <= x <= hi and is zero outside.
template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  std::vector<S> out(a.size());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, da[i]));
  auto an = a.node();
  return detail::make_op<S>("clamp", a.shape(), std::move(out), {&a}, [an, lo, hi](auto& self) {
    if (!an->needs_grad) return;
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S x = an->data[i];
      if (x >= lo && x <= hi) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S total(0);
  for (S v : a.data()) total += v;
  auto an = a.node();
  return detail::make_op<S>("sum", Shape{}, std::vector<S>{total}, {&a}, [an](auto& self) {
    if (!an->needs_grad) return;
    auto g = an->ensure_grad();
    const S gs = self.grad[0];
    for (auto& v : g) v += gs;
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  S total(0);
  for (S v : a.data()) total += v;
  const S inv = S(1) / static_cast<S>(a.size());
  auto an = a.node();
  return detail::make_op<S>("mean", Shape{}, std::vector<S>{total * inv}, {&a},
                            [an, inv](auto& self) {
                              if (!an->needs_grad) return;
                              auto g = an->ensure_grad();
                              const S gs = self.grad[0] * inv;
                              for (auto& v : g) v += gs;
                            });
}

/// Mean squared error between two same-shape tensors, as a scalar.
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  return mean(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<S> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return detail::make_op<S>("reshape", std::move(shape), std::move(out), {&a}, [an](auto& self) {
    if (an->needs_grad) detail::accumulate(*an, std::span<const S>(self.grad));
  });
}

/// Slice [c0, c1) along axis 1 of a rank>=2 tensor.
template <typename S>
Tensor<S> slice_axis1(const Tensor<S>& a, std::size_t c0, std::size_t c1) {
  if (a.rank() < 2) throw DimensionError("slice_axis1 requires rank >= 2");
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (c0 >= c1 || c1 > c) throw DimensionError("slice_axis1: bad range");
  std::size_t inner = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t cw = c1 - c0;
  Shape oshape = a.shape();
  oshape[1] = cw;
  std::vector<S> out(n * cw * inner);
  auto da = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    const S* src = da.data() + (i * c + c0) * inner;
    std::copy(src, src + cw * inner, out.data() + i * cw * inner);
  }
  auto an = a.node();
  return detail::make_op<S>("slice_axis1", std::move(oshape), std::move(out), {&a},
                            [an, n, c, c0, cw, inner](auto& self) {
                              if (!an->needs_grad) return;
                              auto g = an->ensure_grad();
                              for (std::size_t i = 0; i < n; ++i) {
                                S* dst = g.data() + (i * c + c0) * inner;
                                const S* src = self.grad.data() + i * cw * inner;
                                for (std::size_t j = 0; j < cw * inner; ++j) dst[j] += src[j];
                              }
                            });
}

/// Select one item of the leading axis, keeping rank (dim0 becomes 1).
template <typename S>
Tensor<S> slice_item(const Tensor<S>& a, std::size_t index) {
  if (a.rank() < 1) throw DimensionError("slice_item requires rank >= 1");
  if (index >= a.dim(0)) throw DimensionError("slice_item: index out of range");
  std::size_t inner = a.size() / a.dim(0);
  Shape oshape = a.shape();
  oshape[0] = 1;
  std::vector<S> out(a.data().begin() + index * inner, a.data().begin() + (index + 1) * inner);
  auto an = a.node();
  return detail::make_op<S>("slice_item", std::move(oshape), std::move(out), {&a},
                            [an, index, inner](auto& self) {
                              if (!an->needs_grad) return;
                              auto g = an->ensure_grad();
                              for (std::size_t j = 0; j < inner; ++j)
                                g[index * inner + j] += self.grad[j];
                            });
}

/// Concatenate along axis 1; all other extents must match.
template <typename S>
Tensor<S> concat_axis1(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != b.rank() || a.rank() < 2) throw DimensionError("concat_axis1: rank mismatch");
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != 1 && a.dim(i) != b.dim(i)) {
      throw DimensionError("concat_axis1: shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::size_t inner = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  Shape oshape = a.shape();
  oshape[1] = ca + cb;
  std::vector<S> out(n * (ca + cb) * inner);
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(da.begin() + i * ca * inner, da.begin() + (i + 1) * ca * inner,
              out.begin() + i * (ca + cb) * inner);
    std::copy(db.begin() + i * cb * inner, db.begin() + (i + 1) * cb * inner,
              out.begin() + (i * (ca + cb) + ca) * inner);
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("concat_axis1", std::move(oshape), std::move(out), {&a, &b},
                            [an, bn, n, ca, cb, inner](auto& self) {
                              if (an->needs_grad) {
                                auto g = an->ensure_grad();
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < ca * inner; ++j)
                                    g[i * ca * inner + j] += self.grad[i * (ca + cb) * inner + j];
                              }
                              if (bn->needs_grad) {
                                auto g = bn->ensure_grad();
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < cb * inner; ++j)
                                    g[i * cb * inner + j] +=
                                        self.grad[(i * (ca + cb) + ca) * inner + j];
                              }
                            });
}

// ---------------------------------------------------------------------------
// Softmax over the last axis
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& a) {
  if (a.rank() < 1) throw DimensionError("softmax_lastdim requires rank >= 1");
  const std::size_t cols = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / cols;
  std::vector<S> out(a.size());
  auto da = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* x = da.data() + r * cols;
    S* y = out.data() + r * cols;
    S mx = x[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    for (std::size_t j = 0; j < cols; ++j) y[j] = x[j] - mx;
    detail::vexp_fixed(y, y, cols);
    S total(0);
    for (std::size_t j = 0; j < cols; ++j) total += y[j];
    const S inv = S(1) / total;
    for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
  }
  auto an = a.node();
  return detail::make_op<S>("softmax", a.shape(), std::move(out), {&a},
                            [an, rows, cols](auto& self) {
                              if (!an->needs_grad) return;
                              auto g = an->ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r) {
                                const S* y = self.data.data() + r * cols;
                                const S* dy = self.grad.data() + r * cols;
                                S dot(0);
                                for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
                                S* gx = g.data() + r * cols;
                                for (std::size_t j = 0; j < cols; ++j)
                                  gx[j] += (dy[j] - dot) * y[j];
                              }
                            });
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when disabled)
// ---------------------------------------------------------------------------

template <typename S, typename RngT>
Tensor<S> dropout(const Tensor<S>& a, double p, RngT& rng, bool enabled) {
  if (!enabled || p <= 0.0) return a;
  if (p >= 1.0) throw ContractError("dropout rate must be < 1");
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<S>>(a.size());
  std::vector<S> out(a.size());
  auto da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.bernoulli(p) ? S(0) : scale;
    out[i] = da[i] * (*mask)[i];
  }
  auto an = a.node();
  return detail::make_op<S>("dropout", a.shape(), std::move(out), {&a}, [an, mask](auto& self) {
    if (!an->needs_grad) return;
    auto g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Graph walk (tests, structural invariants)
// ---------------------------------------------------------------------------

/// Visits every node reachable from root through parent links once, calling
/// fn(id, op_name, parent_ids).
template <typename S, typename Fn>
void graph_walk(const Tensor<S>& root, Fn&& fn) {
  std::unordered_set<const void*> visited;
  std::vector<std::shared_ptr<detail::Node<S>>> stack{root.node()};
  visited.insert(root.id());
  while (!stack.empty()) {
    auto node = stack.back();
    stack.pop_back();
    std::vector<const void*> parent_ids;
    parent_ids.reserve(node->parents.size());
    for (const auto& p : node->parents) parent_ids.push_back(p.get());
    fn(static_cast<const void*>(node.get()), node->op, parent_ids);
    for (const auto& p : node->parents) {
      if (!visited.count(p.get())) {
        visited.insert(p.get());
        stack.push_back(p);
      }
    }
  }
}

}  // namespace satdm
