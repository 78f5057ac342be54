// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pkn/error.hpp"

namespace pkn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor;

namespace detail {

template <class T>
struct Node;

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;  // null for leaves

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// One recorded operation. The closure owns whatever the forward saved and
// writes input gradients given the output gradient.
template <class T>
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const std::vector<T>&)> backward;
};

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

/// Dense row-major tensor with a reverse-mode gradient slot.
///
/// Copies are shallow handles onto the same storage, so an optimizer that
/// holds a Tensor updates the network's parameter in place.
template <class T = float>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : impl_(std::make_shared<Impl>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (shape.empty()) throw DimensionError("tensor needs at least one dimension");
    if (pkn::numel(shape) != data.size()) {
      throw DimensionError("shape " + to_string(shape) + " holds " + std::to_string(pkn::numel(shape)) +
                           " values, data has " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = pkn::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = pkn::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (impl_->node) throw UsageError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return impl_->node == nullptr; }
  std::string op() const { return impl_->node ? impl_->node->op : std::string("leaf"); }

  /// Same values, no history, no gradient.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  /// Deep copy of values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), impl_->data, requires_grad); }

  void backward() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

namespace detail {

template <class T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

// Wraps a freshly computed result and records the graph edge when any
// input participates in differentiation.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(const std::vector<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_mode()) return out;
  bool needs = false;
  for (auto* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  for (auto* in : inputs) node->inputs.push_back(in->impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

// Inputs before the tensors computed from them.
template <class T>
std::vector<TensorImpl<T>*> topo_order(TensorImpl<T>* root) {
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      auto* child = impl->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }
  return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss.
///
/// Leaf gradients accumulate across calls; intermediate gradients are
/// recomputed on every call.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw UsageError("backward() on undefined tensor");
  if (loss.numel() != 1) throw UsageError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) throw UsageError("backward() on a loss that does not require grad");
  auto* root = loss.impl().get();
  auto order = detail::topo_order(root);
  for (auto* impl : order) {
    if (impl->node) impl->grad.assign(impl->data.size(), T(0));
  }
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    if (impl->node) impl->node->backward(impl->grad);
  }
}

template <class T>
void Tensor<T>::backward() const {
  pkn::backward(*this);
}

}  // namespace pkn
