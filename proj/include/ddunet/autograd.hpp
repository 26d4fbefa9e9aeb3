#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "ddunet/tensor.hpp"

namespace ddunet {

/// Define-by-run record of differentiable ops, one per thread and element type.
///
/// Ops append an entry when recording is enabled and at least one input
/// requires a gradient. backward() replays entries in exact reverse order,
/// so every entry's inputs were produced strictly earlier on the tape.
/// clear() bumps the generation; outputs of an older generation can no
/// longer seed a backward pass.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_output)>;

  struct Entry {
    std::shared_ptr<TensorImpl<T>> output;
    BackwardFn backward;
  };

  static Tape& current();

  bool recording() const { return enabled_; }
  void set_recording(bool enabled) { enabled_ = enabled; }

  std::size_t size() const { return entries_.size(); }
  std::size_t generation() const { return generation_; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }

  void record(Tensor<T>& output, BackwardFn backward);
  void clear();

 private:
  std::vector<Entry> entries_;
  std::size_t generation_ = 1;
  bool enabled_ = true;
};

/// Disables recording on the current thread's tape for its lifetime.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape<T>::current().recording()) { Tape<T>::current().set_recording(false); }
  ~NoGradGuard() { Tape<T>::current().set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// True when an op over `inputs` must be recorded.
template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::current().recording()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool needs_grad(std::span<const Tensor<T>> inputs) {
  if (!Tape<T>::current().recording()) return false;
  for (const Tensor<T>& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

/// Accumulates d(loss)/d(tensor) into every requires_grad leaf reachable from
/// `loss`. Non-leaf gradients are reset first, leaf gradients accumulate
/// across calls until zero_grad.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ddunet
