#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ddunet/ops.hpp"
#include "ddunet/rng.hpp"
#include "ddunet/tensor.hpp"

namespace ddunet {

enum class Mode { train, eval };

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered, name-addressed view over a model's tensors. Parameters are the
/// trainable leaves; buffers are persistent non-trainable state (BN running
/// statistics) that checkpoints carry but parameter counts exclude.
template <typename T>
class ParamStore {
 public:
  void add_parameter(std::string name, Tensor<T> tensor);
  void add_buffer(std::string name, Tensor<T> tensor);

  const std::vector<NamedTensor<T>>& parameters() const { return parameters_; }
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }
  // Parameters followed by buffers, in registration order.
  std::vector<NamedTensor<T>> all() const;

  std::size_t parameter_count() const;
  std::optional<Tensor<T>> find(const std::string& name) const;
  void zero_grad();

 private:
  void check_unique(const std::string& name) const;

  std::vector<NamedTensor<T>> parameters_;
  std::vector<NamedTensor<T>> buffers_;
};

/// He-normal initialisation: N(0, gain * sqrt(2 / fan_in)).
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

template <typename T>
struct BatchNorm2dState {
  explicit BatchNorm2dState(std::size_t channels);

  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
  Mode mode = Mode::train;

  std::size_t channels() const { return gamma.numel(); }
  void collect(ParamStore<T>& store, const std::string& prefix) const;
};

/// Train mode normalises with batch statistics over (B, H, W) and folds them
/// into the running estimates (new = (1 - m) * old + m * batch, unbiased
/// variance). Eval mode is the fixed affine map given by the running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNorm2dState<T>& state);

struct ConvBlockOptions {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool relu = true;
};

// conv (no bias) -> BN -> optional relu; padding dilation*(k-1)/2.
template <typename T>
class ConvBlock {
 public:
  ConvBlock(std::size_t in_channels, std::size_t out_channels, const ConvBlockOptions& options, Rng& rng);

  Tensor<T> forward(const Tensor<T>& input);
  void set_mode(Mode mode) { bn.mode = mode; }
  void collect(ParamStore<T>& store, const std::string& prefix) const;

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  const Conv2dOptions& conv_options() const { return conv_; }

  Tensor<T> weight;
  BatchNorm2dState<T> bn;
  bool relu;

 private:
  std::size_t in_channels_, out_channels_;
  Conv2dOptions conv_;
};

// Depthwise 3x3 ConvBlock, groups = channels, padding = dilation.
template <typename T>
class DWConvBlock : public ConvBlock<T> {
 public:
  DWConvBlock(std::size_t channels, std::size_t dilation, Rng& rng)
      : ConvBlock<T>(channels, channels, ConvBlockOptions{3, 1, dilation, channels, true}, rng) {}
};

/// MobileNetV2-style inverted residual with expansion factor 1:
/// pw 1x1 -> dw 3x3 -> pw 1x1 (linear), with an identity skip when
/// in_channels == out_channels.
template <typename T>
class InvertedResidual {
 public:
  InvertedResidual(std::size_t in_channels, std::size_t out_channels, Rng& rng);

  Tensor<T> forward(const Tensor<T>& input);
  void set_mode(Mode mode);
  void collect(ParamStore<T>& store, const std::string& prefix) const;
  bool has_skip() const { return skip_; }

  ConvBlock<T> expand;
  ConvBlock<T> depthwise;
  ConvBlock<T> project;

 private:
  bool skip_;
};

template <typename T>
class Linear {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng, double init_gain = 1.0);

  Tensor<T> forward(const Tensor<T>& input) const { return linear(input, weight, bias); }
  void collect(ParamStore<T>& store, const std::string& prefix) const;

  Tensor<T> weight;
  Tensor<T> bias;
};

}  // namespace ddunet
