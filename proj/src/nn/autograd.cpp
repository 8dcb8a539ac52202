#include "pdlatent/nn/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "pdlatent/error.hpp"

namespace pdlatent::nn {

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad = Tensor<T>(value.shape(), T{0});
  return grad;
}

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (node_->grad.empty()) return Tensor<T>(node_->value.shape(), T{0});
  return node_->grad;
}

template <typename T>
void Var<T>::zero_grad() {
  node_->grad = Tensor<T>();
}

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Builds an interior node. Parents and the backward closure are only kept when some
// parent needs a gradient.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T>* grad_if_needed(const NodePtr<T>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  }
}

template <typename T, typename F>
Var<T> unary_map(const Var<T>& x, F f, std::function<void(Node<T>&)> back) {
  Tensor<T> out(x.shape());
  const auto in = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_node<T>(std::move(out), {x.node()}, std::move(back));
}

}  // namespace

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  // Post-order DFS gives a topological order; iterate it in reverse.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, const LayerSpec& spec) {
  auto out = conv3d_forward(x.value(), w.value(), b.value(), spec);
  return make_node<T>(std::move(out), {x.node(), w.node(), b.node()}, [spec](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    conv3d_backward(px->value, pw->value, self.grad, spec, grad_if_needed(px), grad_if_needed(pw),
                    grad_if_needed(pb));
  });
}

template <typename T>
Var<T> conv_transpose3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, const LayerSpec& spec) {
  auto out = conv_transpose3d_forward(x.value(), w.value(), b.value(), spec);
  return make_node<T>(std::move(out), {x.node(), w.node(), b.node()}, [spec](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    conv_transpose3d_backward(px->value, pw->value, self.grad, spec, grad_if_needed(px), grad_if_needed(pw),
                              grad_if_needed(pb));
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto out = linear_forward(x.value(), w.value(), b.value());
  return make_node<T>(std::move(out), {x.node(), w.node(), b.node()}, [](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    linear_backward(px->value, pw->value, self.grad, grad_if_needed(px), grad_if_needed(pw), grad_if_needed(pb));
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary_map<T>(x, [](T v) { return v > T{0} ? v : T{0}; }, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (self.value[i] > T{0}) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  return make_node<T>(x.value().reshaped(std::move(shape)), {x.node()}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_node<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      if (!self.parents[k]->requires_grad) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_node<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_node<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  return unary_map<T>(x, [factor](T v) { return v * factor; }, [factor](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary_map<T>(x, [c](T v) { return v + c; }, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary_map<T>(x, [](T v) { return std::exp(v); }, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary_map<T>(x, [](T v) { return v * v; }, [](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * T{2} * p->value[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  return make_node<T>(Tensor<T>({1}, std::vector<T>{acc}), {x.node()}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

#define PDLATENT_INSTANTIATE_AUTOGRAD(T)                                                         \
  template struct Node<T>;                                                                       \
  template class Var<T>;                                                                         \
  template void backward(const Var<T>&);                                                         \
  template Var<T> conv3d(const Var<T>&, const Var<T>&, const Var<T>&, const LayerSpec&);         \
  template Var<T> conv_transpose3d(const Var<T>&, const Var<T>&, const Var<T>&, const LayerSpec&); \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                           \
  template Var<T> relu(const Var<T>&);                                                           \
  template Var<T> reshape(const Var<T>&, Shape);                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                             \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                             \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale(const Var<T>&, T);                                                       \
  template Var<T> add_scalar(const Var<T>&, T);                                                  \
  template Var<T> exp(const Var<T>&);                                                            \
  template Var<T> square(const Var<T>&);                                                         \
  template Var<T> sum(const Var<T>&);

PDLATENT_INSTANTIATE_AUTOGRAD(float)
PDLATENT_INSTANTIATE_AUTOGRAD(double)

}  // namespace pdlatent::nn
