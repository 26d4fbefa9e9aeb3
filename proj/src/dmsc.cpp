#include "ddunet/dmsc.hpp"

#include <algorithm>

namespace ddunet {
namespace {

std::size_t gate_width(std::size_t channels) { return std::max<std::size_t>(channels / 4, 4); }

}  // namespace

template <typename T>
DmscBlock<T>::DmscBlock(std::size_t channels, Rng& rng, bool skip_fuse)
    : entry(channels, channels, ConvBlockOptions{1, 1, 1, 1, true}, rng),
      branches{std::make_unique<DWConvBlock<T>>(channels, kDmscDilations[0], rng),
               std::make_unique<DWConvBlock<T>>(channels, kDmscDilations[1], rng),
               std::make_unique<DWConvBlock<T>>(channels, kDmscDilations[2], rng),
               std::make_unique<DWConvBlock<T>>(channels, kDmscDilations[3], rng)},
      gate_hidden_layer(channels, gate_width(channels), rng),
      gate_logits_layer(gate_width(channels), kDmscDilations.size(), rng),
      fuse(channels, channels, ConvBlockOptions{3, 1, 1, 1, true}, rng),
      exit(channels, channels, ConvBlockOptions{1, 1, 1, 1, false}, rng),
      channels_(channels),
      gate_hidden_(gate_width(channels)),
      skip_fuse_(skip_fuse) {}

template <typename T>
void DmscBlock<T>::check_input(const Tensor<T>& input) const {
  if (!input.defined() || input.rank() != 4 || input.dim(1) != channels_) {
    throw ShapeError("dmsc: expected (B, " + std::to_string(channels_) + ", H, W) input, got " +
                     (input.defined() ? shape_str(input.shape()) : std::string("<undefined>")));
  }
}

template <typename T>
DmscTrace<T> DmscBlock<T>::forward_traced(const Tensor<T>& input) {
  check_input(input);
  DmscTrace<T> t;
  const std::size_t batch = input.dim(0);
  t.mapped = entry.forward(input);
  t.pooled = reshape(adaptive_avg_pool_to_1(t.mapped), {batch, channels_});
  t.logits = gate_logits_layer.forward(relu(gate_hidden_layer.forward(t.pooled)));
  t.weights = softmax(t.logits);
  for (std::size_t r = 0; r < branches.size(); ++r) t.branches[r] = branches[r]->forward(t.mapped);
  t.aggregated = gated_sum(std::span<const Tensor<T>>(t.branches), t.weights);
  t.fused = skip_fuse_ ? t.aggregated : fuse.forward(t.aggregated);
  t.output = relu(add(exit.forward(t.fused), input));
  return t;
}

template <typename T>
Tensor<T> DmscBlock<T>::branch_weights(const Tensor<T>& input) {
  check_input(input);
  const std::size_t batch = input.dim(0);
  Tensor<T> pooled = reshape(adaptive_avg_pool_to_1(entry.forward(input)), {batch, channels_});
  return softmax(gate_logits_layer.forward(relu(gate_hidden_layer.forward(pooled))));
}

template <typename T>
void DmscBlock<T>::set_mode(Mode mode) {
  entry.set_mode(mode);
  for (auto& b : branches) b->set_mode(mode);
  fuse.set_mode(mode);
  exit.set_mode(mode);
}

template <typename T>
void DmscBlock<T>::collect(ParamStore<T>& store, const std::string& prefix) const {
  entry.collect(store, prefix + ".entry");
  for (std::size_t r = 0; r < branches.size(); ++r) {
    branches[r]->collect(store, prefix + ".branch_d" + std::to_string(kDmscDilations[r]));
  }
  gate_hidden_layer.collect(store, prefix + ".gate.fc1");
  gate_logits_layer.collect(store, prefix + ".gate.fc2");
  fuse.collect(store, prefix + ".fuse");
  exit.collect(store, prefix + ".exit");
}

template class DmscBlock<float>;
template class DmscBlock<double>;

}  // namespace ddunet
