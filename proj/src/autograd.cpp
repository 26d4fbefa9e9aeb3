#include "ddunet/autograd.hpp"

#include <string>

namespace ddunet {

template <typename T>
Tape<T>& Tape<T>::current() {
  thread_local Tape<T> tape;
  return tape;
}

template <typename T>
void Tape<T>::record(Tensor<T>& output, BackwardFn backward) {
  TensorImpl<T>* impl = output.impl();
  impl->requires_grad = true;
  impl->tape_generation = generation_;
  impl->tape_position = entries_.size();
  entries_.push_back(Entry{output.impl_ptr(), std::move(backward)});
}

template <typename T>
void Tape<T>::clear() {
  entries_.clear();
  ++generation_;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must hold exactly one element, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  Tape<T>& tape = Tape<T>::current();
  const TensorImpl<T>* root = loss.impl();
  if (tape.size() == 0 || root->tape_position == kNotRecorded ||
      root->tape_generation != tape.generation() || root->tape_position >= tape.size() ||
      tape.entry(root->tape_position).output.get() != root) {
    throw ContractError("backward: loss was not recorded on the active tape");
  }

  const std::size_t last = root->tape_position;
  for (std::size_t i = 0; i <= last; ++i) tape.entry(i).output->grad.clear();
  tape.entry(last).output->grad.assign(1, T(1));

  for (std::size_t i = last + 1; i-- > 0;) {
    const auto& e = tape.entry(i);
    if (e.output->grad.empty()) continue;  // not reachable from loss
    e.backward(std::span<const T>(e.output->grad));
  }
}

template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace ddunet
