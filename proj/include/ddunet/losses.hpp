#pragma once

#include <array>
#include <vector>

#include "ddunet/ops.hpp"

namespace ddunet {

inline constexpr double kBceClamp = 1e-7;

/// Deep-supervision weights, finest stage first.
struct LossWeights {
  std::array<double, 3> alpha = {1.0, 0.5, 0.2};

  void validate() const;
};

/// Mean binary cross-entropy over all B*H*W pixels. Probabilities are clamped
/// to [1e-7, 1 - 1e-7]; the gradient is zero where the clamp is active.
/// Labels must be exactly 0 or 1.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& probabilities, const Tensor<T>& labels);

/// alpha_1 * L_1 + alpha_2 * L_2 + alpha_3 * L_3, with L_1 the finest stage.
template <typename T>
Tensor<T> total_loss(const std::array<Tensor<T>, 3>& finest_first, const LossWeights& weights);

template <typename T>
struct DeepSupervisionLoss {
  Tensor<T> total;
  std::array<double, 3> stage_losses{};  // finest first
};

/// Upsamples each logits map to the label resolution (repeated bilinear 2x),
/// applies sigmoid + BCE per stage and combines with `weights`.
/// `logits_coarse_first` is the model's train-mode output order.
template <typename T>
DeepSupervisionLoss<T> deep_supervision_loss(const std::vector<Tensor<T>>& logits_coarse_first,
                                             const Tensor<T>& labels, const LossWeights& weights);

}  // namespace ddunet
