#pragma once

#include <cstddef>
#include <string>

#include "ddunet/nn_blocks.hpp"

namespace ddunet {

template <typename T>
struct GeneratedKernel {
  Tensor<T> weights;  // (B, C2, C1, 3, 3)
  Tensor<T> bias;     // (B, C2)
};

/// Dynamic weights & bias generator.
///
/// Both feature maps are pooled to (B, C), concatenated to (B, 2C) and passed
/// through linear -> relu -> linear. The C2*C1*9 + C2 outputs per sample are
/// split into a 3x3 kernel bank and a bias, weights first.
template <typename T>
class DwbgGenerator {
 public:
  DwbgGenerator(std::size_t channels, Rng& rng, std::size_t out_channels = 1);

  GeneratedKernel<T> generate(const Tensor<T>& encoder_features, const Tensor<T>& decoder_features) const;
  void collect(ParamStore<T>& store, const std::string& prefix) const;

  std::size_t channels() const { return channels_; }
  std::size_t out_channels() const { return out_channels_; }
  std::size_t hidden() const { return hidden_layer.weight.dim(0); }

  Linear<T> hidden_layer;
  Linear<T> output_layer;  // init scaled by 0.1 so early kernels stay small

 private:
  std::size_t channels_;
  std::size_t out_channels_;
};

/// Per-sample 3x3 convolution, stride 1, padding 1: out[b] = conv(input[b], weights[b]) + bias[b].
template <typename T>
Tensor<T> dynamic_conv(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

/// Generator plus dynamic conv; returns raw logits (B, C2, Hd, Wd).
template <typename T>
class DwbgHead {
 public:
  DwbgHead(std::size_t channels, Rng& rng) : generator(channels, rng) {}

  Tensor<T> forward(const Tensor<T>& encoder_features, const Tensor<T>& decoder_features) const;
  void collect(ParamStore<T>& store, const std::string& prefix) const { generator.collect(store, prefix); }

  DwbgGenerator<T> generator;
};

extern template class DwbgGenerator<float>;
extern template class DwbgGenerator<double>;
extern template class DwbgHead<float>;
extern template class DwbgHead<double>;

}  // namespace ddunet
