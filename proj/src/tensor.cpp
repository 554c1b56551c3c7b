// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/tensor.hpp"

#include <cmath>
#include <sstream>

#include "kgfuse/error.hpp"

namespace kgfuse {

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw Error(ErrorKind::kShape, "tensor shape " + shape_str(shape) + " does not match " +
                                       std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) {
    throw Error(ErrorKind::kShape, "item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(node_->shape, node_->value, requires_grad);
}

Tensor Tensor::detach() const { return from(node_->shape, node_->value, false); }

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const std::shared_ptr<detail::Node>& node) { nodes_.push_back(node); }

void Tape::clear() { nodes_.clear(); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorKind::kShape, "backward: loss must be a scalar, got shape " +
                                       (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (nodes_.empty()) throw Error(ErrorKind::kInvalidArgument, "backward: tape is empty");
  std::size_t end = nodes_.size();
  while (end > 0 && nodes_[end - 1].get() != loss.node()) --end;
  if (end == 0) {
    throw Error(ErrorKind::kInvalidArgument, "backward: loss was not produced on this tape");
  }
  for (std::size_t i = 0; i < end; ++i) nodes_[i]->grad.clear();
  // Leaf gradients from earlier calls are set aside and added back at the end,
  // so this pass is computed exactly as on a fresh tape.
  std::vector<std::pair<detail::Node*, std::vector<double>>> saved;
  for (std::size_t i = 0; i < end; ++i) {
    for (const auto& parent : nodes_[i]->parents) {
      if (parent->leaf && !parent->grad.empty()) {
        saved.emplace_back(parent.get(), std::move(parent->grad));
        parent->grad.clear();
      }
    }
  }
  loss.node()->grad.assign(1, 1.0);
  for (std::size_t i = end; i-- > 0;) {
    auto& node = *nodes_[i];
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
  for (auto& [node, old] : saved) {
    if (node->grad.empty()) {
      node->grad = std::move(old);
      continue;
    }
    for (std::size_t k = 0; k < old.size(); ++k) node->grad[k] = old[k] + node->grad[k];
  }
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> values,
                   const std::vector<const Tensor*>& inputs, const char* op,
                   std::function<void(detail::Node&)> backward_fn) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const Tensor* in : inputs) {
    for (double v : in->values()) inputs_finite = inputs_finite && std::isfinite(v);
  }
  if (inputs_finite) {
    for (double v : values) {
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::kDiverged, std::string("non-finite value produced by ") + op);
      }
    }
  }
#endif
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool track = false;
  if (t_grad_enabled) {
    for (const Tensor* in : inputs) track = track || in->requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(inputs.size());
    for (const Tensor* in : inputs) node->parents.push_back(in->shared_node());
    node->backward = std::move(backward_fn);
    Tape::current().record(node);
  }
  return Tensor(std::move(node));
}

}  // namespace kgfuse
