#include "ddunet/dwbg.hpp"

#include <algorithm>

#include "ddunet/detail/conv_kernel.hpp"

namespace ddunet {

template <typename T>
DwbgGenerator<T>::DwbgGenerator(std::size_t channels, Rng& rng, std::size_t out_channels)
    : hidden_layer(2 * channels, std::max<std::size_t>(channels, 8), rng),
      output_layer(std::max<std::size_t>(channels, 8), out_channels * channels * 9 + out_channels, rng, 0.1),
      channels_(channels),
      out_channels_(out_channels) {}

template <typename T>
GeneratedKernel<T> DwbgGenerator<T>::generate(const Tensor<T>& enc, const Tensor<T>& dec) const {
  for (const Tensor<T>* f : {&enc, &dec}) {
    if (!f->defined() || f->rank() != 4 || f->dim(1) != channels_) {
      throw ShapeError("dwbg: expected (B, " + std::to_string(channels_) + ", H, W) features, got " +
                       (f->defined() ? shape_str(f->shape()) : std::string("<undefined>")));
    }
  }
  if (enc.dim(0) != dec.dim(0)) {
    throw ShapeError("dwbg: encoder batch " + std::to_string(enc.dim(0)) + " vs decoder batch " +
                     std::to_string(dec.dim(0)));
  }
  const std::size_t batch = dec.dim(0);
  const std::size_t kernel_size = out_channels_ * channels_ * 9;
  Tensor<T> squeezed = concat_channels(adaptive_avg_pool_to_1(enc), adaptive_avg_pool_to_1(dec));
  Tensor<T> code = reshape(squeezed, {batch, 2 * channels_});
  Tensor<T> raw = output_layer.forward(relu(hidden_layer.forward(code)));
  GeneratedKernel<T> k;
  k.weights = reshape(slice_channels(raw, 0, kernel_size), {batch, out_channels_, channels_, 3, 3});
  k.bias = slice_channels(raw, kernel_size, kernel_size + out_channels_);
  return k;
}

template <typename T>
void DwbgGenerator<T>::collect(ParamStore<T>& store, const std::string& prefix) const {
  hidden_layer.collect(store, prefix + ".fc1");
  output_layer.collect(store, prefix + ".fc2");
}

template <typename T>
Tensor<T> dynamic_conv(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (!input.defined() || input.rank() != 4) throw ShapeError("dynamic_conv: input must be (B, C1, H, W)");
  if (!weights.defined() || weights.rank() != 5 || weights.dim(3) != 3 || weights.dim(4) != 3) {
    throw ShapeError("dynamic_conv: weights must be (B, C2, C1, 3, 3)");
  }
  const std::size_t batch = input.dim(0);
  if (weights.dim(0) != batch || !bias.defined() || bias.rank() != 2 || bias.dim(0) != batch) {
    throw ShapeError("dynamic_conv: batch mismatch between input " + shape_str(input.shape()) +
                     ", weights " + shape_str(weights.shape()) + " and bias " +
                     (bias.defined() ? shape_str(bias.shape()) : std::string("<undefined>")));
  }
  if (weights.dim(2) != input.dim(1) || bias.dim(1) != weights.dim(1)) {
    throw ShapeError("dynamic_conv: channel mismatch between input " + shape_str(input.shape()) +
                     ", weights " + shape_str(weights.shape()) + " and bias " + shape_str(bias.shape()));
  }
  detail::ConvGeometry g;
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weights.dim(1);
  g.kernel_h = 3;
  g.kernel_w = 3;
  g.padding = 1;
  g.out_height = g.height;
  g.out_width = g.width;

  Tensor<T> out({batch, g.out_channels, g.height, g.width});
  const T* x = input.data().data();
  const T* w = weights.data().data();
  const T* bs = bias.data().data();
  T* y = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    detail::conv_forward_sample(g, x + b * g.input_size(), w + b * g.weight_size(), bs + b * g.out_channels,
                                y + b * g.output_size());
  }
  if (needs_grad<T>({&input, &weights, &bias})) {
    Tape<T>::current().record(out, [input, weights, bias, g, batch](std::span<const T> go) mutable {
      for (std::size_t b = 0; b < batch; ++b) {
        const T* gob = go.data() + b * g.output_size();
        if (input.requires_grad()) {
          detail::conv_backward_input_sample(g, gob, weights.data().data() + b * g.weight_size(),
                                             input.ensure_grad().data() + b * g.input_size());
        }
        if (weights.requires_grad()) {
          detail::conv_backward_weight_sample(g, gob, input.data().data() + b * g.input_size(),
                                              weights.ensure_grad().data() + b * g.weight_size());
        }
        if (bias.requires_grad()) {
          detail::conv_backward_bias_sample(g, gob, bias.ensure_grad().data() + b * g.out_channels);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> DwbgHead<T>::forward(const Tensor<T>& enc, const Tensor<T>& dec) const {
  GeneratedKernel<T> k = generator.generate(enc, dec);
  return dynamic_conv(dec, k.weights, k.bias);
}

template class DwbgGenerator<float>;
template class DwbgGenerator<double>;
template class DwbgHead<float>;
template class DwbgHead<double>;
template Tensor<float> dynamic_conv(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> dynamic_conv(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace ddunet
