#pragma once

// Dense row-major tensors with a dynamically recorded reverse-mode graph.
//
// Every op returns a fresh tensor; a tensor's values never change after the
// op that produced it returns. Leaves created with requires_grad are the
// exception: optimizers update them in place between graph constructions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ganbalance {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// 64-byte aligned storage for tensor buffers. Vectorized kernels pick their
/// scalar/packet split from the buffer address, so a fixed alignment keeps
/// results bit-identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  BasicTensor() = default;

  BasicTensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
      : BasicTensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

  BasicTensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : BasicTensor(std::move(shape), Buffer<T>(data), requires_grad) {}

  BasicTensor(Shape shape, Buffer<T> data, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    for (auto extent : shape)
      if (extent == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return BasicTensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel(shape);
    return BasicTensor(std::move(shape), Buffer<T>(n, value), requires_grad);
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{1}, Buffer<T>{value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  // Only meaningful for leaves; ops never mutate their outputs after return.
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
    return node_->data;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  const std::string& op() const { return node_->op; }

  /// Same values, no history.
  BasicTensor detach() const {
    return BasicTensor(node_->shape, node_->data, false);
  }

  BasicTensor clone() const {
    return BasicTensor(node_->shape, node_->data, node_->requires_grad);
  }

  const std::shared_ptr<NodeType>& node() const { return node_; }

  // Op construction: records inputs and the backward closure only when some
  // input needs a gradient and recording is enabled.
  static BasicTensor from_op(std::string op, Shape shape, Buffer<T> data,
                             std::vector<BasicTensor> inputs,
                             std::function<void(NodeType&)> backward) {
    BasicTensor out;
    out.node_ = std::make_shared<NodeType>();
    out.node_->shape = std::move(shape);
    out.node_->data = std::move(data);
    out.node_->op = std::move(op);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs && grad_enabled()) {
      out.node_->requires_grad = true;
      for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<NodeType> node_;
};

using Tensor = BasicTensor<float>;

/// One recorded operation in execution order.
struct GraphRecord {
  std::string op;
  std::vector<std::size_t> inputs;
  std::size_t output = 0;
};

/// The recorded history behind a tensor, topologically ordered so that
/// every record appears after the records producing its inputs.
template <typename T>
class Graph {
 public:
  explicit Graph(const BasicTensor<T>& root) {
    std::unordered_set<const detail::Node<T>*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        auto* child = node->inputs[next++].get();
        if (visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
    for (std::size_t i = 0; i < order_.size(); ++i) index_[order_[i]] = i;
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node<T>*>& nodes() const { return order_; }

  std::vector<GraphRecord> records() const {
    std::vector<GraphRecord> out;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      GraphRecord rec{order_[i]->op, {}, i};
      for (const auto& in : order_[i]->inputs) rec.inputs.push_back(index_.at(in.get()));
      out.push_back(std::move(rec));
    }
    return out;
  }

 private:
  std::vector<detail::Node<T>*> order_;
  std::unordered_map<const detail::Node<T>*, std::size_t> index_;
};

/// Back-propagates from a scalar loss. Leaf gradients accumulate across calls
/// until zero_grad(); interior gradient buffers are released once consumed.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;
  Graph<T> graph(loss);
  auto& nodes = graph.nodes();
  nodes.back()->grad_buffer()[0] += T(1);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf()) continue;
    if (node->backward && !node->grad.empty()) node->backward(*node);
    Buffer<T>().swap(node->grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

namespace detail {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <typename T>
void accumulate(Node<T>& input, std::span<const T> delta) {
  if (!input.requires_grad) return;
  auto& g = input.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return BasicTensor<T>::from_op("add", a.shape(), std::move(out), {a, b}, [](auto& self) {
    detail::accumulate<T>(*self.inputs[0], self.grad);
    detail::accumulate<T>(*self.inputs[1], self.grad);
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return BasicTensor<T>::from_op("sub", a.shape(), std::move(out), {a, b}, [](auto& self) {
    detail::accumulate<T>(*self.inputs[0], self.grad);
    auto& rhs = *self.inputs[1];
    if (!rhs.requires_grad) return;
    auto& g = rhs.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return BasicTensor<T>::from_op("mul", a.shape(), std::move(out), {a, b}, [](auto& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    if (lhs.requires_grad) {
      auto& g = lhs.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rhs.data[i];
    }
    if (rhs.requires_grad) {
      auto& g = rhs.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * lhs.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return BasicTensor<T>::from_op("scale", a.shape(), std::move(out), {a}, [factor](auto& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  double total = 0.0;
  for (auto v : a.data()) total += v;
  return BasicTensor<T>::from_op("sum", Shape{1}, {static_cast<T>(total)}, {a}, [](auto& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  Buffer<T> out(a.data().begin(), a.data().end());
  return BasicTensor<T>::from_op("reshape", std::move(shape), std::move(out), {a}, [](auto& self) {
    detail::accumulate<T>(*self.inputs[0], self.grad);
  });
}

/// Collapses every axis after the first: [N, ...] -> [N, prod(...)].
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& a) {
  return reshape(a, Shape{a.dim(0), a.size() / a.dim(0)});
}

}  // namespace ganbalance
