/* Copyright 2026 The HTR Toolkit Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Dense tensors with a recorded reverse-mode graph.
//
// A Tensor is a shared handle: copies alias the same storage and graph node,
// the way parameters are shared between a network and its optimizer. Every
// operation that consumes a tensor requiring gradients records a node holding
// its inputs and a backward rule; Tensor::backward() visits the recorded nodes
// in reverse topological order exactly once and accumulates gradients
// additively into every reachable tensor that requires them.

#ifndef HTR_TENSOR_HPP_
#define HTR_TENSOR_HPP_

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "htr/common.hpp"

namespace htr {

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first gradient lands
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording in the current thread for its lifetime.
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

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    validate(shape);
    node_->data.assign(htr::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    validate(shape);
    if (values.size() != htr::numel(shape)) {
      throw ShapeError("tensor data has " + std::to_string(values.size()) +
                       " elements but shape " + to_string(shape) +
                       " needs " + std::to_string(htr::numel(shape)));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), numel()}; }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  // Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
  // intermediate gradients are recomputed each call.
  void backward() const {
    if (numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " +
                       to_string(shape()));
    }
    if (!node_->requires_grad) return;
    const std::vector<NodeType*> order = topological_order();
    for (NodeType* n : order) {
      if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
    }
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
  }

  const std::shared_ptr<NodeType>& node() const { return node_; }

  // Wraps the output of an operation, recording a graph node when any input
  // requires gradients and recording is enabled.
  static Tensor from_op(Shape shape, std::vector<T> values, const char* op,
                        std::initializer_list<Tensor> inputs,
                        std::function<void(NodeType&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->op = op;
    for (const Tensor& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t extent : shape) {
      if (extent == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         to_string(shape));
      }
    }
  }

  std::vector<NodeType*> topological_order() const {
    std::vector<NodeType*> order;
    std::unordered_set<NodeType*> visited;
    std::vector<std::pair<NodeType*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        NodeType* p = n->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<NodeType> node_;
};

// Runs `fill` on the gradient buffer of `node` when it takes gradients.
template <typename T, typename F>
inline void accumulate_grad(detail::Node<T>& node, F&& fill) {
  if (!node.requires_grad) return;
  fill(node.grad_buffer());
}

}  // namespace htr

#endif  // HTR_TENSOR_HPP_
