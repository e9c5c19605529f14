/*
 * Copyright (c) 2026 The srcnet Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace srcnet {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents do not conform to an operation's rule.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API precondition (not a shape rule) is violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for inconsistent hyperparameters.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// Gradient recording switch. Thread-local so that concurrent inference
// threads can disable recording without affecting a training thread.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Heap storage aligned to a cache line. Eigen's vectorized reductions peel
// leading elements based on the address, so unaligned buffers would make the
// summation order, and hence the rounding, depend on where malloc put them.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align}));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t{Align});
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const noexcept {
    return true;
  }
};

}  // namespace detail

/// Contiguous element storage used by tensors and kernel scratch space.
template <typename T>
using Buffer = std::vector<T, detail::AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  // Gradient flowing during the current backward pass only.
  Buffer<T> pass_grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads pass_grad of this node, adds into parents' pass_grad.
  std::function<void(std::span<const T>)> backward_fn;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("Tensor: shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) +
                           " elements but data has " +
                           std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  template <typename Alloc>
    requires(!std::is_same_v<Alloc, detail::AlignedAllocator<T>>)
  Tensor(Shape shape, const std::vector<T, Alloc>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Buffer<T> data(shape_numel(shape), T{0});
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Buffer<T> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, Buffer<T>{value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  explicit operator bool() const noexcept { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct writes are reserved for parameter initialization, optimizer
  // updates and finite-difference probing.
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item: tensor of shape " + shape_str(shape()) +
                          " is not a scalar");
    }
    return node_->data[0];
  }

  T operator[](std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(numel(), T{0});
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no tape history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// True when both handles refer to the same storage.
  bool same_as(const Tensor& other) const { return node_ == other.node_; }

  const NodePtr& node() const { return node_; }

  /// Backpropagate from this scalar; see srcnet::backward.
  void backward() const;

 private:
  NodePtr node_;
};

namespace detail {

// Builds the output of a primitive. The tape entry is recorded only when
// recording is enabled and some input requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(std::span<const T>)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) node.parents.push_back(in.node());
  }
  node.backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
Tensor<T> make_result_n(Shape shape, Buffer<T> data,
                        const std::vector<Tensor<T>>& inputs,
                        std::function<void(std::span<const T>)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node.parents.push_back(in.node());
  }
  node.backward_fn = std::move(backward_fn);
  return out;
}

/// Scratch gradient buffer of an input, or an empty span if the input does
/// not take part in differentiation.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  auto& node = *t.node();
  if (node.pass_grad.empty()) node.pass_grad.assign(node.data.size(), T{0});
  return node.pass_grad;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients are added into the
/// persistent grad buffer of every requires_grad ancestor (including the
/// loss itself and interior nodes); per-pass scratch is released afterwards.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not on the tape");
  }
  using Node = detail::Node<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->pass_grad.assign(1, T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->pass_grad.empty()) {
      node->backward_fn(node->pass_grad);
    }
  }
  for (Node* node : order) {
    if (node->pass_grad.empty()) continue;
    if (node->grad.empty()) {
      node->grad = std::move(node->pass_grad);
    } else {
      for (std::size_t i = 0; i < node->grad.size(); ++i) {
        node->grad[i] += node->pass_grad[i];
      }
    }
    node->pass_grad.clear();
    node->pass_grad.shrink_to_fit();
  }
}

template <typename T>
void Tensor<T>::backward() const {
  srcnet::backward(*this);
}

}  // namespace srcnet
