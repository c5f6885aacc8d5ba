#pragma once

// Dense NCHW tensors with a dynamically recorded reverse-mode graph.
//
// Every op that sees at least one input with requires_grad (and runs while
// gradient recording is enabled) produces a non-leaf node that remembers its
// parents and a closure that pushes the output gradient back into them.
// backward() on a scalar walks that DAG once in reverse topological order and
// then releases it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "quanos/error.hpp"

namespace quanos {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool consumed = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty() && !backward; }
  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool empty() const { return node_->value.empty(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access to the stored values. Only meaningful on leaves
  /// (parameters, inputs); mutating an interior node corrupts its graph.
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  bool is_leaf() const { return node_->is_leaf(); }
  const std::string& op() const { return node_->op; }

  /// Fresh leaf holding a copy of the values; no graph, no grad.
  Tensor detach() const;

  /// Reverse-mode sweep from this scalar. Throws ContractError for
  /// non-scalars and StateError when the graph was already consumed.
  void backward();

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Topologically ordered view of the graph reachable from a root tensor.
/// Every node appears after all of its parents.
template <typename T>
struct ComputeGraph {
  std::vector<const Node<T>*> nodes;
  std::vector<const Node<T>*> leaves;

  static ComputeGraph trace(const Tensor<T>& root);
  std::size_t count_op(const std::string& op) const;
};

/// Whether ops record graph edges on the current thread.
bool grad_enabled();

/// RAII switch that disables graph recording for the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Builds the output node of an op. When no input needs a gradient (or
/// recording is off) the parents/closure are dropped.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::string op,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template struct ComputeGraph<float>;
extern template struct ComputeGraph<double>;

}  // namespace quanos
