#include "pdlatent/nn/adam.hpp"

#include <cmath>

#include "pdlatent/error.hpp"

namespace pdlatent::nn {

template <typename T>
void adam_step(AdamState<T>& state, const std::vector<Tensor<T>*>& params,
               const std::vector<const Tensor<T>*>& grads) {
  if (params.size() != grads.size()) throw ShapeError("adam: params and grads differ in count");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape(), T{0});
      state.v.emplace_back(p->shape(), T{0});
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: state does not match parameter list");

  const auto& o = state.options;
  ++state.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    const Tensor<T>& g = *grads[k];
    if (p.shape() != g.shape() || p.shape() != state.m[k].shape()) throw ShapeError("adam: shape mismatch");
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      p[i] = static_cast<T>(p[i] - o.lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
}

template <typename T>
void adam_step(AdamState<T>& state, std::vector<Var<T>>& params) {
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.push_back(p.grad());
  std::vector<Tensor<T>*> ps;
  std::vector<const Tensor<T>*> gs;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ps.push_back(&params[i].mutable_value());
    gs.push_back(&grads[i]);
  }
  adam_step(state, ps, gs);
}

template void adam_step(AdamState<float>&, const std::vector<Tensor<float>*>&, const std::vector<const Tensor<float>*>&);
template void adam_step(AdamState<double>&, const std::vector<Tensor<double>*>&,
                        const std::vector<const Tensor<double>*>&);
template void adam_step(AdamState<float>&, std::vector<Var<float>>&);
template void adam_step(AdamState<double>&, std::vector<Var<double>>&);

}  // namespace pdlatent::nn
