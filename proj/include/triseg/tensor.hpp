#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace triseg {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // scatters node.grad into parents

  bool leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Dense N-d tensor participating in a dynamically recorded autodiff graph.
/// A Tensor is a cheap handle; copies alias the same node. Values are
/// immutable once an op has consumed them except through values_mut(),
/// which is reserved for leaves (parameters, inputs).
template <class T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    check_shape(shape);
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check_shape(shape);
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  /// Result node of an op. Graph edges are dropped when recording is off or
  /// no parent needs gradients.
  static Tensor result(Shape shape, std::vector<T> values,
                       std::vector<std::shared_ptr<Node>> parents,
                       std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    bool track = grad_enabled();
    if (track) {
      track = false;
      for (const auto& p : parents) track = track || p->requires_grad;
    }
    if (track) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf(); }

  Tensor& set_requires_grad(bool rg) {
    if (rg && !node_->leaf())
      throw std::invalid_argument("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = rg;
    return *this;
  }

  std::span<const T> values() const { return node_->value; }
  /// Mutable access for leaves (parameter updates, input staging).
  std::span<T> values_mut() { return node_->value; }

  /// Accumulated gradient; materializes a zero buffer on leaves never
  /// touched by backward so disconnected leaves read as exactly zero.
  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  }

  /// Reverse-mode accumulation from a scalar. Non-leaf gradients are
  /// recomputed from scratch each call; leaf gradients accumulate across
  /// calls until zero_grad().
  void backward() const {
    if (numel() != 1) throw std::invalid_argument("backward: loss must be a scalar tensor");
    std::vector<Node*> order = topo_order(node_.get());
    for (Node* n : order)
      if (!n->leaf()) n->grad.assign(n->value.size(), T(0));
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
    for (int64_t e : shape)
      if (e <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(shape));
  }

  // Iterative post-order DFS; parents precede children in the result.
  static std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> pushed{root};
    std::vector<std::pair<Node*, size_t>> stack{{root, 0}};
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (pushed.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

// x - x is exactly zero for every finite x and NaN otherwise, so the sum
// of those differences is zero iff all values are finite. This form
// vectorizes; a per-element isfinite branch does not.
template <class T>
inline bool all_finite(std::span<const T> v) {
  T acc = T(0);
  const T* p = v.data();
  const int64_t n = static_cast<int64_t>(v.size());
#pragma omp simd reduction(+ : acc)
  for (int64_t i = 0; i < n; ++i) acc += p[i] - p[i];
  return acc == T(0);
}

template <class T>
inline bool all_finite(const Tensor<T>& t) {
  return all_finite(t.values());
}

}  // namespace triseg
