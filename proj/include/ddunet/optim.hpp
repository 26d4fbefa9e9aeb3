#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ddunet/nn_blocks.hpp"

namespace ddunet {

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;  // one buffer per parameter, created on the first step
};

/// One bias-corrected Adam update of every parameter in place. Every
/// parameter must carry a gradient; the first one that does not is named in
/// the ContractError and nothing is updated.
template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& state);

/// lr0 * gamma^epoch.
double lr_schedule(std::size_t epoch, double lr0, double gamma);

}  // namespace ddunet
