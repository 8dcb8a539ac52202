#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pdlatent/nn/autograd.hpp"

// Central finite-difference check of reverse-mode gradients. The loss builder receives
// the input Vars and must return a scalar Var; it is re-run on perturbed copies.
namespace gradcheck {

using pdlatent::nn::Tensor;
using pdlatent::nn::Var;

template <typename T>
Tensor<T> random_tensor(pdlatent::nn::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Returns the max relative error over every element of every input.
template <typename T>
double max_rel_error(const std::vector<Tensor<T>>& inputs,
                     const std::function<Var<T>(const std::vector<Var<T>>&)>& loss_fn, double h = 1e-3) {
  std::vector<Var<T>> vars;
  for (const auto& t : inputs) vars.push_back(Var<T>::parameter(t));
  pdlatent::nn::backward(loss_fn(vars));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = vars[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var<T>> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor<T> t = inputs[j];
          if (j == k) t[i] = static_cast<T>(static_cast<double>(t[i]) + delta);
          probe.push_back(Var<T>(t));
        }
        return static_cast<double>(loss_fn(probe).value()[0]);
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      worst = std::max(worst, rel_error(static_cast<double>(analytic[i]), numeric));
    }
  }
  return worst;
}

// Reduces an arbitrary-shaped output to a scalar with fixed random weights so every
// output element contributes a distinct cotangent.
template <typename T>
Var<T> weighted_sum(const Var<T>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return pdlatent::nn::sum(pdlatent::nn::mul(y, Var<T>(random_tensor<T>(y.shape(), rng))));
}

}  // namespace gradcheck
