#include "ddunet/optim.hpp"

#include <cmath>

#include "ddunet/errors.hpp"

namespace ddunet {

template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& state) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient");
  }
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  ++state.step;
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(state.beta1, static_cast<double>(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(state.beta2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(state.lr), eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].tensor;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size()) throw ContractError("adam_step: moment buffer size changed for '" + params[i].name + "'");
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T m_hat = m[k] / c1;
      const T v_hat = v[k] / c2;
      w[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double lr_schedule(std::size_t epoch, double lr0, double gamma) {
  return lr0 * std::pow(gamma, static_cast<double>(epoch));
}

template void adam_step(const std::vector<NamedTensor<float>>&, AdamState<float>&);
template void adam_step(const std::vector<NamedTensor<double>>&, AdamState<double>&);

}  // namespace ddunet
