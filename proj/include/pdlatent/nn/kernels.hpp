#pragma once

#include <array>

#include "pdlatent/nn/tensor.hpp"

namespace pdlatent::nn {

enum class LayerKind { Conv3d, ConvTranspose3d, Linear, Relu };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

using Size3 = std::array<int, 3>;

// One row of an encoder/decoder table. output_padding is per axis so a decoder can
// undo odd intermediate sizes of its encoder exactly.
struct LayerSpec {
  LayerKind kind = LayerKind::Conv3d;
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  Size3 output_padding{0, 0, 0};

  void validate() const;
  // Spatial output size for the given input size (conv kinds only).
  Size3 output_size(const Size3& in) const;
  // Weight tensor shape: conv3d (out,in,k,k,k), convtranspose3d (in,out,k,k,k), linear (in,out).
  Shape weight_shape() const;
  // Number of inputs feeding one output, used for initialisation bounds.
  int fan_in() const;
};

// floor((n + 2p - k) / s) + 1
int conv_output_size(int n, int kernel, int stride, int padding);
// (n - 1) s - 2p + k + output_padding
int conv_transpose_output_size(int n, int kernel, int stride, int padding, int output_padding);

// Raw kernels. Inputs are (N, C, D, H, W) for the conv kinds and (N, F) for linear.
// Gradient functions accumulate (+=) into the supplied outputs so callers control the
// reduction order.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const LayerSpec& spec);
template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, const LayerSpec& spec,
                     Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);

template <typename T>
Tensor<T> conv_transpose3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                                   const LayerSpec& spec);
template <typename T>
void conv_transpose3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out,
                               const LayerSpec& spec, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out, Tensor<T>* grad_x,
                     Tensor<T>* grad_w, Tensor<T>* grad_b);

}  // namespace pdlatent::nn
