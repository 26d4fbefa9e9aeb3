#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ddunet/autograd.hpp"
#include "ddunet/tensor.hpp"

// Differentiable primitives. Every op records a backward rule on the current
// thread's tape when any input requires a gradient.
namespace ddunet {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

/// Zero-padded grouped/dilated 2-D convolution over (B, Cin, H, W).
/// `weight` is (Cout, Cin/groups, kH, kW); `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& options);

enum class Activation { relu, sigmoid };

template <typename T>
Tensor<T> elementwise_activation(const Tensor<T>& input, Activation kind);
template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  return elementwise_activation(input, Activation::relu);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  return elementwise_activation(input, Activation::sigmoid);
}

// Row-wise softmax of a (B, K) tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& input);

// (B, Cin) x (Cout, Cin)^T + bias(Cout). Bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

// (B, C, H, W) -> (B, C, 1, 1) spatial mean.
template <typename T>
Tensor<T> adaptive_avg_pool_to_1(const Tensor<T>& input);

// Half-pixel-centre bilinear 2x upsampling with edge clamping.
template <typename T>
Tensor<T> bilinear_upsample_2x(const Tensor<T>& input);

// Concatenation along axis 1. Both operands must agree on every other axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// Channels [begin, end) along axis 1.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor);

// Sum of all elements, shape (1).
template <typename T>
Tensor<T> sum(const Tensor<T>& input);

/// out[b] = sum_r weights[b, r] * branches[r][b] for branches of equal shape
/// (B, ...) and weights (B, R). One scalar per branch per sample.
template <typename T>
Tensor<T> gated_sum(std::span<const Tensor<T>> branches, const Tensor<T>& weights);

}  // namespace ddunet
