#pragma once

#include <cstdint>
#include <vector>

#include "pdlatent/nn/autograd.hpp"

namespace pdlatent::nn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments are shaped like their parameters and created on the first step.
template <typename T>
struct AdamState {
  AdamOptions options;
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

// One bias-corrected Adam update of params[i] using grads[i].
template <typename T>
void adam_step(AdamState<T>& state, const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads);

// Convenience overload reading the accumulated gradients of parameter Vars.
template <typename T>
void adam_step(AdamState<T>& state, std::vector<Var<T>>& params);

}  // namespace pdlatent::nn
