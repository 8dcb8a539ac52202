#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pdlatent/nn/kernels.hpp"
#include "pdlatent/nn/tensor.hpp"

namespace pdlatent::nn {

// A recorded value in the computation graph. Leaves created with requires_grad
// accumulate gradients across backward() calls until zero_grad().
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer();
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);
  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled tensor when no gradient has been accumulated.
  Tensor<T> grad() const;
  void zero_grad();

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Var from_node(std::shared_ptr<Node<T>> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Reverse-mode sweep from a scalar (single-element) loss. Throws ShapeError otherwise.
template <typename T>
void backward(const Var<T>& loss);

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, const LayerSpec& spec);
template <typename T>
Var<T> conv_transpose3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, const LayerSpec& spec);
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
template <typename T>
Var<T> add_scalar(const Var<T>& x, T c);
template <typename T>
Var<T> exp(const Var<T>& x);
template <typename T>
Var<T> square(const Var<T>& x);
// Sum of all elements, shape {1}.
template <typename T>
Var<T> sum(const Var<T>& x);

}  // namespace pdlatent::nn
