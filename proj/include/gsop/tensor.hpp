#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gsop/error.hpp"

namespace gsop {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Whether an operation runs with training semantics (batch statistics, dropout)
/// or inference semantics (running statistics).
enum class Mode { train, eval };

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// One value in the autodiff graph. Node ids are drawn from a global monotone
/// counter, so every operation's inputs carry smaller ids than its output and
/// sorting by id is a valid topological order of the recorded tape.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t id = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  bool is_leaf() const { return !backward; }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(gsop::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (values.size() != gsop::numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                           to_string(shape));
    }
    node_->data = std::move(values);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const& { return node_->data; }
  // A span into a temporary would dangle (e.g. `for (v : f(x).data())`).
  std::span<const T> data() const&& = delete;
  // Direct writes are meant for leaves (parameters, inputs); ops never mutate
  // tensors they did not create.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const& { return node_->data; }
  std::vector<T> values() const&& { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const& { return node_->grad; }
  std::span<const T> grad() const&& = delete;
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    node_->requires_grad = value;
    return *this;
  }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  T operator[](std::size_t i) const { return node_->data[i]; }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Same values, no graph history, no gradient.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(node_->shape, std::move(out));
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The backward rule and input links are only recorded
/// when grad mode is on and some input requires grad.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
#ifndef NDEBUG
  for (const T& v : values) {
    if (!std::isfinite(v)) {
      bool finite_inputs = true;
      for (const auto* in : inputs)
        for (const T& x : in->data()) finite_inputs = finite_inputs && std::isfinite(x);
      if (finite_inputs) throw Error("non-finite value produced from finite inputs");
      break;
    }
  }
#endif
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  auto& node = out.node();
  node.requires_grad = true;
  for (const auto* in : inputs) node.inputs.push_back(in->node_ptr());
  node.backward = std::move(backward);
  return out;
}

/// Recorded operation order reachable from a root node.
template <class T>
class Tape {
 public:
  explicit Tape(Node<T>& root) {
    std::unordered_set<const Node<T>*> seen;
    std::vector<Node<T>*> stack{&root};
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      if (!seen.insert(n).second) continue;
      order_.push_back(n);
      for (auto& in : n->inputs)
        if (in->requires_grad) stack.push_back(in.get());
    }
    std::sort(order_.begin(), order_.end(), [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });
  }

  /// Nodes in reverse topological order (root first).
  const std::vector<Node<T>*>& reverse_order() const { return order_; }

 private:
  std::vector<Node<T>*> order_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are reset each call.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw UsageError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  auto& root = loss.node();
  if (!root.requires_grad) throw UsageError("backward() on a tensor that does not require grad");
  Tape<T> tape(root);
  for (Node<T>* n : tape.reverse_order()) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  root.ensure_grad();
  root.grad[0] += T(1);
  for (Node<T>* n : tape.reverse_order()) {
    if (n->is_leaf()) continue;
    for (auto& in : n->inputs)
      if (in->requires_grad) in->ensure_grad();
    n->backward(*n);
  }
}

}  // namespace gsop
