#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ddunet/errors.hpp"

namespace ddunet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

inline constexpr std::size_t kNotRecorded = std::numeric_limits<std::size_t>::max();

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  // Set for op outputs; (generation, position) identify the producing tape entry.
  std::size_t tape_generation = 0;
  std::size_t tape_position = kNotRecorded;
};

/// Shared handle to a dense row-major array. Copies alias the same storage,
/// which is what lets modules, the parameter store, and the optimizer all see
/// one parameter buffer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const { return impl_->tape_position == kNotRecorded; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  /// Allocates a zero gradient buffer on first use. The gradient slot is
  /// mutable through const handles: backward rules hold inputs by value.
  std::vector<T>& ensure_grad() const;
  void zero_grad() const;

  /// Deep copy of the values only; the result is a fresh leaf.
  Tensor detach() const;
  /// Element-type conversion; copies values into a new leaf.
  template <typename U>
  Tensor<U> cast() const;

  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> values(impl_->data.begin(), impl_->data.end());
  return Tensor<U>(impl_->shape, std::move(values));
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ddunet
