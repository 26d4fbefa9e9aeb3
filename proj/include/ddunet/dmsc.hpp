#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <string>

#include "ddunet/nn_blocks.hpp"

namespace ddunet {

inline constexpr std::array<std::size_t, 4> kDmscDilations = {1, 2, 3, 4};

/// Every intermediate of one DMSC forward pass, in evaluation order.
template <typename T>
struct DmscTrace {
  Tensor<T> mapped;       // entry 1x1 ConvBlock output, the input to every branch
  Tensor<T> pooled;       // (B, C) squeezed descriptor
  Tensor<T> logits;       // (B, 4)
  Tensor<T> weights;      // (B, 4), softmax of logits
  std::array<Tensor<T>, 4> branches;  // dilated depthwise outputs, dilation 1..4
  Tensor<T> aggregated;   // per-sample weighted sum of the branches
  Tensor<T> fused;        // 3x3 ConvBlock on the aggregate (aliases `aggregated` when skipped)
  Tensor<T> output;
};

/// Dynamic multi-scale convolution.
///
/// A 1x1 ConvBlock maps the input; a pooled descriptor of the mapped features
/// drives a two-layer gate (C -> max(C/4, 4) -> 4) whose softmax weights mix
/// four dilated depthwise branches. The mix goes through a 3x3 ConvBlock, a
/// 1x1 conv + BN, and is added back onto the block input before the final relu.
/// With `skip_fuse` the 3x3 ConvBlock is bypassed and the exit conv reads the
/// raw aggregate.
template <typename T>
class DmscBlock {
 public:
  DmscBlock(std::size_t channels, Rng& rng, bool skip_fuse = false);

  Tensor<T> forward(const Tensor<T>& input) { return forward_traced(input).output; }
  DmscTrace<T> forward_traced(const Tensor<T>& input);
  /// Gate weights (B, 4) exactly as forward() computes them for `input`.
  Tensor<T> branch_weights(const Tensor<T>& input);

  void set_mode(Mode mode);
  void collect(ParamStore<T>& store, const std::string& prefix) const;

  std::size_t channels() const { return channels_; }
  std::size_t gate_hidden() const { return gate_hidden_; }
  bool skip_fuse() const { return skip_fuse_; }

  ConvBlock<T> entry;
  std::array<std::unique_ptr<DWConvBlock<T>>, 4> branches;
  Linear<T> gate_hidden_layer;
  Linear<T> gate_logits_layer;
  ConvBlock<T> fuse;
  ConvBlock<T> exit;

 private:
  void check_input(const Tensor<T>& input) const;

  std::size_t channels_;
  std::size_t gate_hidden_;
  bool skip_fuse_;
};

extern template class DmscBlock<float>;
extern template class DmscBlock<double>;

}  // namespace ddunet
