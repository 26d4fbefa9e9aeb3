#include "ddunet/losses.hpp"

#include <cmath>
#include <string>

namespace ddunet {

void LossWeights::validate() const {
  for (double a : alpha) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("loss weights must be finite and non-negative");
  }
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& probabilities, const Tensor<T>& labels) {
  if (probabilities.shape() != labels.shape()) {
    throw ShapeError("bce_loss: probabilities " + shape_str(probabilities.shape()) + " vs labels " +
                     shape_str(labels.shape()));
  }
  auto p = probabilities.data();
  auto y = labels.data();
  const std::size_t n = p.size();
  if (n == 0) throw ShapeError("bce_loss: empty input");
  const double lo = kBceClamp, hi = 1.0 - kBceClamp;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != T(0) && y[i] != T(1)) {
      throw DataError("bce_loss: label value " + std::to_string(static_cast<double>(y[i])) + " at index " +
                      std::to_string(i) + " is not 0 or 1");
    }
    const double pc = std::min(std::max(static_cast<double>(p[i]), lo), hi);
    acc += y[i] == T(1) ? std::log(pc) : std::log(1.0 - pc);
  }
  Tensor<T> out({1}, static_cast<T>(-acc / static_cast<double>(n)));
  if (needs_grad<T>({&probabilities})) {
    Tape<T>::current().record(out, [probabilities, labels, n, lo, hi](std::span<const T> go) mutable {
      auto p = probabilities.data();
      auto y = labels.data();
      auto& g = probabilities.ensure_grad();
      const double scale = static_cast<double>(go[0]) / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double pv = static_cast<double>(p[i]);
        if (pv < lo || pv > hi) continue;
        const double d = y[i] == T(1) ? -1.0 / pv : 1.0 / (1.0 - pv);
        g[i] += static_cast<T>(scale * d);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> total_loss(const std::array<Tensor<T>, 3>& finest_first, const LossWeights& weights) {
  weights.validate();
  Tensor<T> total = scale(finest_first[0], static_cast<T>(weights.alpha[0]));
  for (std::size_t j = 1; j < 3; ++j) total = add(total, scale(finest_first[j], static_cast<T>(weights.alpha[j])));
  return total;
}

template <typename T>
DeepSupervisionLoss<T> deep_supervision_loss(const std::vector<Tensor<T>>& logits_coarse_first,
                                             const Tensor<T>& labels, const LossWeights& weights) {
  if (logits_coarse_first.size() != 3) {
    throw ContractError("deep_supervision_loss: expected 3 logits maps, got " +
                        std::to_string(logits_coarse_first.size()));
  }
  if (labels.rank() != 4) throw ShapeError("deep_supervision_loss: labels must be (B, 1, S, S)");
  const std::size_t target = labels.dim(2);
  std::array<Tensor<T>, 3> stages;
  DeepSupervisionLoss<T> result;
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor<T> logits = logits_coarse_first[i];
    while (logits.dim(2) < target) logits = bilinear_upsample_2x(logits);
    if (logits.shape() != labels.shape()) {
      throw ShapeError("deep_supervision_loss: logits " + shape_str(logits_coarse_first[i].shape()) +
                       " cannot be upsampled to labels " + shape_str(labels.shape()));
    }
    stages[2 - i] = bce_loss(sigmoid(logits), labels);
    result.stage_losses[2 - i] = static_cast<double>(stages[2 - i].item());
  }
  result.total = total_loss(stages, weights);
  return result;
}

#define DDUNET_INSTANTIATE(T)                                                                           \
  template Tensor<T> bce_loss(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> total_loss(const std::array<Tensor<T>, 3>&, const LossWeights&);                  \
  template DeepSupervisionLoss<T> deep_supervision_loss(const std::vector<Tensor<T>>&, const Tensor<T>&, \
                                                        const LossWeights&);

DDUNET_INSTANTIATE(float)
DDUNET_INSTANTIATE(double)
#undef DDUNET_INSTANTIATE

}  // namespace ddunet
