#pragma once

#include <cstddef>

namespace ddunet::detail {

// Per-sample direct convolution. Shared by static conv2d and the dynamic
// per-sample head so that the two agree bit for bit.
struct ConvGeometry {
  std::size_t in_channels = 0, height = 0, width = 0;
  std::size_t out_channels = 0, kernel_h = 0, kernel_w = 0;
  std::size_t stride = 1, padding = 0, dilation = 1, groups = 1;
  std::size_t out_height = 0, out_width = 0;

  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  std::size_t weight_size() const { return out_channels * in_per_group() * kernel_h * kernel_w; }
  std::size_t input_size() const { return in_channels * height * width; }
  std::size_t output_size() const { return out_channels * out_height * out_width; }
};

// out = conv(in, weight) + bias; bias may be null. `out` is overwritten.
template <typename T>
void conv_forward_sample(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out);

// grad_in += conv^T(grad_out, weight)
template <typename T>
void conv_backward_input_sample(const ConvGeometry& g, const T* grad_out, const T* weight, T* grad_in);

// grad_weight += correlation of grad_out with in
template <typename T>
void conv_backward_weight_sample(const ConvGeometry& g, const T* grad_out, const T* in, T* grad_weight);

// grad_bias += spatial sums of grad_out
template <typename T>
void conv_backward_bias_sample(const ConvGeometry& g, const T* grad_out, T* grad_bias);

}  // namespace ddunet::detail
