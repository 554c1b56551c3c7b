// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kgfuse {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major float64 array with an optional gradient slot. Copies share
// the underlying storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  // Empty span until a backward pass reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  Tensor clone(bool requires_grad) const;
  // Same values, no graph history.
  Tensor detach() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, const std::vector<const Tensor*>&,
                            const char*, std::function<void(detail::Node&)>);
  friend class Tape;

  std::shared_ptr<detail::Node> node_;
};

// Thread-local define-by-run record of executed ops. Nodes are appended in
// execution order, which is a topological order of the graph.
class Tape {
 public:
  static Tape& current();

  void record(const std::shared_ptr<detail::Node>& node);
  void clear();
  std::size_t size() const noexcept { return nodes_.size(); }

  // Populates gradients of every requires-grad tensor the loss depends on.
  // Leaf gradients accumulate across calls; intermediate gradients are
  // recomputed from scratch on each call.
  void backward(const Tensor& loss);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph construction for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Creates an op output. When grad mode is on and any input requires grad, the
// output is linked to its inputs and recorded on the current tape.
Tensor make_result(Shape shape, std::vector<double> values,
                   const std::vector<const Tensor*>& inputs, const char* op,
                   std::function<void(detail::Node&)> backward_fn);

}  // namespace kgfuse
