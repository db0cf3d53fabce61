#pragma once

// Reverse-mode automatic differentiation on dense N-d arrays.
//
// Each operation appends a node to an implicit tape: node ids are assigned in
// creation order, so walking reachable nodes by descending id replays the tape
// backwards, visiting every node exactly once with all consumers finished
// before their producers. The graph is released after backward() unless
// retain_graph is requested.

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "vsx/common.hpp"

namespace vsx {

namespace detail {

inline u64 next_node_id() {
  static std::atomic<u64> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // sized lazily; persists until zero_grad
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;  // backward already consumed this node
  u64 id = next_node_id();
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->grad and accumulates into parent grads.
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), S(0));
  }
};

}  // namespace detail

/// Returns the thread-local autograd recording flag.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables tape recording for its scope (inference / data paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
class Tensor {
 public:
  using Node = detail::TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  // ---- factories ----

  static Tensor from_data(Shape shape, std::vector<S> values) {
    if (vsx::numel(shape) != static_cast<i64>(values.size())) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    auto count = static_cast<size_t>(vsx::numel(shape));
    return from_data(std::move(shape), std::vector<S>(count, S(0)));
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }

  static Tensor full(Shape shape, S value) {
    auto count = static_cast<size_t>(vsx::numel(shape));
    return from_data(std::move(shape), std::vector<S>(count, value));
  }

  static Tensor scalar(S value) { return from_data({}, {value}); }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    auto count = static_cast<size_t>(vsx::numel(shape));
    std::vector<S> v(count);
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return from_data(std::move(shape), std::move(v));
  }

  static Tensor normal(Shape shape, Rng& rng, double mean, double stddev) {
    auto count = static_cast<size_t>(vsx::numel(shape));
    std::vector<S> v(count);
    for (auto& x : v) x = static_cast<S>(rng.normal(mean, stddev));
    return from_data(std::move(shape), std::move(v));
  }

  // ---- basic access ----

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return check().shape; }
  i64 numel() const { return static_cast<i64>(check().values.size()); }
  i64 dim(size_t axis) const { return check().shape.at(axis); }
  size_t ndim() const { return check().shape.size(); }

  S* data() { return check().values.data(); }
  const S* data() const { return check().values.data(); }
  std::vector<S>& vals() { return check().values; }
  const std::vector<S>& vals() const { return check().values; }

  S item() const {
    if (numel() != 1) {
      throw ArgumentError("item() requires a single-element tensor, got " +
                          shape_str(shape()));
    }
    return check().values[0];
  }

  S operator()(i64 i) const { return check().values[static_cast<size_t>(i)]; }
  S& operator()(i64 i) { return check().values[static_cast<size_t>(i)]; }

  /// Linear index into an N x C x D x H x W tensor.
  S at5(i64 n, i64 c, i64 d, i64 h, i64 w) const {
    const Shape& s = shape();
    return check().values[static_cast<size_t>(
        (((n * s[1] + c) * s[2] + d) * s[3] + h) * s[4] + w)];
  }

  // ---- autograd surface ----

  bool requires_grad() const { return check().requires_grad; }
  bool is_leaf() const { return check().leaf; }

  Tensor& set_requires_grad(bool on) {
    Node& n = check();
    if (!n.leaf) throw StateError("requires_grad may only be toggled on leaf tensors");
    n.requires_grad = on;
    return *this;
  }

  bool has_grad() const { return defined() && !node_->grad.empty(); }

  const std::vector<S>& grad() const {
    const Node& n = check();
    if (n.grad.empty()) throw StateError("tensor has no gradient; call backward first");
    return n.grad;
  }

  std::vector<S>& grad() {
    Node& n = check();
    if (n.grad.empty()) throw StateError("tensor has no gradient; call backward first");
    return n.grad;
  }

  void zero_grad() {
    Node& n = check();
    if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), S(0));
  }

  /// Copy of the values with no autograd history.
  Tensor detach() const { return from_data(shape(), vals()); }

  template <typename T>
  Tensor<T> cast() const {
    const Node& n = check();
    std::vector<T> v(n.values.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(n.values[i]);
    return Tensor<T>::from_data(n.shape, std::move(v));
  }

  /// Reverse pass from a scalar. Accumulates into .grad of every tensor that
  /// requires grad. The recorded graph is released afterwards unless
  /// retain_graph is set; a second backward over the same graph is a state
  /// error.
  void backward(bool retain_graph = false) {
    Node& root = check();
    if (root.values.size() != 1) {
      throw ArgumentError("backward requires a scalar loss, got " + shape_str(root.shape));
    }
    if (root.released) {
      throw StateError("backward called twice on a released graph; rerun the forward pass");
    }
    if (!root.requires_grad) return;

    // Gather every reachable node once, holding shared ownership so that
    // releasing parent links later cannot free a node still on the list.
    std::vector<std::shared_ptr<Node>> nodes;
    std::unordered_set<Node*> seen;
    std::vector<std::shared_ptr<Node>> stack{node_};
    seen.insert(&root);
    while (!stack.empty()) {
      std::shared_ptr<Node> n = stack.back();
      stack.pop_back();
      nodes.push_back(n);
      for (auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
      }
    }
    // Descending id = reverse topological order (inputs precede outputs).
    std::sort(nodes.begin(), nodes.end(),
              [](const std::shared_ptr<Node>& a, const std::shared_ptr<Node>& b) {
                return a->id > b->id;
              });

    // Intermediate grads are per-pass scratch; only leaves accumulate across
    // passes. Clearing here keeps repeated backward over a retained graph
    // from double-counting.
    for (auto& n : nodes) {
      if (!n->leaf) n->grad.assign(n->values.size(), S(0));
    }
    root.ensure_grad();
    root.grad[0] += S(1);
    for (auto& n : nodes) {
      if (n->backward_fn) n->backward_fn(*n);
    }
    if (!retain_graph) {
      for (auto& n : nodes) {
        if (!n->leaf) {
          n->released = true;
          n->backward_fn = nullptr;
          n->parents.clear();
        }
      }
    }
  }

  const std::shared_ptr<Node>& impl() const { return node_; }

 private:
  Node& check() {
    if (!node_) throw StateError("use of an undefined tensor");
    return *node_;
  }
  const Node& check() const {
    if (!node_) throw StateError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

/// Builds an op result node. Records the tape entry only when grad mode is on
/// and some input participates in differentiation.
template <typename S>
Tensor<S> make_op_result(Shape shape, std::vector<S> values,
                         std::vector<Tensor<S>> inputs,
                         std::function<void(TensorNode<S>&)> backward_fn,
                         const char* op_name) {
  if (finite_checks()) assert_all_finite(values, op_name);
  auto out = Tensor<S>::from_data(std::move(shape), std::move(values));
  bool needs = false;
  if (grad_mode()) {
    for (const auto& t : inputs) {
      if (t.defined() && t.impl()->requires_grad) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    auto& node = *out.impl();
    node.leaf = false;
    node.requires_grad = true;
    for (auto& t : inputs) {
      if (t.defined()) node.parents.push_back(t.impl());
    }
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename S>
void accumulate(TensorNode<S>& target, const std::vector<S>& contribution) {
  target.ensure_grad();
  for (size_t i = 0; i < contribution.size(); ++i) target.grad[i] += contribution[i];
}

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace vsx
