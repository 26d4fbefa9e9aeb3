#include "ddunet/nn_blocks.hpp"

#include <cmath>

namespace ddunet {

template <typename T>
void ParamStore<T>::check_unique(const std::string& name) const {
  if (find(name)) throw ContractError("param store: duplicate tensor name '" + name + "'");
}

template <typename T>
void ParamStore<T>::add_parameter(std::string name, Tensor<T> tensor) {
  check_unique(name);
  tensor.set_requires_grad(true);
  parameters_.push_back({std::move(name), std::move(tensor)});
}

template <typename T>
void ParamStore<T>::add_buffer(std::string name, Tensor<T> tensor) {
  check_unique(name);
  buffers_.push_back({std::move(name), std::move(tensor)});
}

template <typename T>
std::vector<NamedTensor<T>> ParamStore<T>::all() const {
  std::vector<NamedTensor<T>> out = parameters_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) n += p.tensor.numel();
  return n;
}

template <typename T>
std::optional<Tensor<T>> ParamStore<T>::find(const std::string& name) const {
  for (const auto& p : parameters_)
    if (p.name == name) return p.tensor;
  for (const auto& b : buffers_)
    if (b.name == name) return b.tensor;
  return std::nullopt;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : parameters_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng, double gain) {
  Tensor<T> t(std::move(shape));
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
BatchNorm2dState<T>::BatchNorm2dState(std::size_t channels)
    : gamma({channels}, T(1)),
      beta({channels}, T(0)),
      running_mean({channels}, T(0)),
      running_var({channels}, T(1)) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
void BatchNorm2dState<T>::collect(ParamStore<T>& store, const std::string& prefix) const {
  store.add_parameter(prefix + ".gamma", gamma);
  store.add_parameter(prefix + ".beta", beta);
  store.add_buffer(prefix + ".running_mean", running_mean);
  store.add_buffer(prefix + ".running_var", running_var);
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNorm2dState<T>& state) {
  if (!input.defined() || input.rank() != 4) throw ShapeError("batchnorm2d: input must be (B, C, H, W)");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  if (channels != state.channels()) {
    throw ShapeError("batchnorm2d: input has " + std::to_string(channels) + " channels, state has " +
                     std::to_string(state.channels()));
  }
  const std::size_t count = batch * area;
  const bool training = state.mode == Mode::train;
  if (training && count <= 1) {
    throw DataError("batchnorm2d: train mode needs more than one value per channel, got B*H*W=" +
                    std::to_string(count) + " for input " + shape_str(input.shape()));
  }

  auto x = input.data();
  std::vector<T> mean(channels), inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (training) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < area; ++i) acc += x[(b * channels + c) * area + i];
      const double mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < area; ++i) {
          const double d = x[(b * channels + c) * area + i] - mu;
          sq += d * d;
        }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.epsilon)));
      auto rm = state.running_mean.mutable_data();
      auto rv = state.running_var.mutable_data();
      const T m = state.momentum;
      rm[c] = (T(1) - m) * rm[c] + m * static_cast<T>(mu);
      rv[c] = (T(1) - m) * rv[c] + m * static_cast<T>(sq / static_cast<double>(count - 1));
    } else {
      mean[c] = state.running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var.data()[c] + state.epsilon);
    }
  }

  Tensor<T> out(input.shape());
  auto y = out.mutable_data();
  auto gamma = state.gamma.data();
  auto beta = state.beta.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * area;
      for (std::size_t i = 0; i < area; ++i)
        y[base + i] = gamma[c] * (x[base + i] - mean[c]) * inv_std[c] + beta[c];
    }

  Tensor<T> g = state.gamma, bt = state.beta;
  if (needs_grad<T>({&input, &g, &bt})) {
    Tape<T>::current().record(out, [input, g, bt, mean, inv_std, training, batch, channels, area,
                                    count](std::span<const T> go) mutable {
      auto x = input.data();
      auto gamma = g.data();
      for (std::size_t c = 0; c < channels; ++c) {
        T sum_go = T(0), sum_go_xhat = T(0);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * area;
          for (std::size_t i = 0; i < area; ++i) {
            const T xhat = (x[base + i] - mean[c]) * inv_std[c];
            sum_go += go[base + i];
            sum_go_xhat += go[base + i] * xhat;
          }
        }
        if (g.requires_grad()) g.ensure_grad()[c] += sum_go_xhat;
        if (bt.requires_grad()) bt.ensure_grad()[c] += sum_go;
        if (!input.requires_grad()) continue;
        auto& gi = input.ensure_grad();
        const T n = static_cast<T>(count);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * area;
          for (std::size_t i = 0; i < area; ++i) {
            if (training) {
              const T xhat = (x[base + i] - mean[c]) * inv_std[c];
              gi[base + i] += gamma[c] * inv_std[c] / n * (n * go[base + i] - sum_go - xhat * sum_go_xhat);
            } else {
              gi[base + i] += gamma[c] * inv_std[c] * go[base + i];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
ConvBlock<T>::ConvBlock(std::size_t in_channels, std::size_t out_channels, const ConvBlockOptions& options,
                        Rng& rng)
    : bn(out_channels), relu(options.relu), in_channels_(in_channels), out_channels_(out_channels) {
  if (options.kernel % 2 == 0) throw ConfigError("conv block: kernel size must be odd");
  if (options.groups == 0 || in_channels % options.groups || out_channels % options.groups) {
    throw ConfigError("conv block: groups=" + std::to_string(options.groups) + " must divide " +
                      std::to_string(in_channels) + " and " + std::to_string(out_channels));
  }
  conv_.stride = options.stride;
  conv_.dilation = options.dilation;
  conv_.groups = options.groups;
  conv_.padding = options.dilation * (options.kernel - 1) / 2;
  const std::size_t fan_in = in_channels / options.groups * options.kernel * options.kernel;
  weight = he_normal<T>({out_channels, in_channels / options.groups, options.kernel, options.kernel}, fan_in,
                        rng);
  weight.set_requires_grad(true);
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& input) {
  Tensor<T> y = batchnorm2d(conv2d(input, weight, Tensor<T>(), conv_), bn);
  return relu ? ddunet::relu(y) : y;
}

template <typename T>
void ConvBlock<T>::collect(ParamStore<T>& store, const std::string& prefix) const {
  store.add_parameter(prefix + ".conv.weight", weight);
  bn.collect(store, prefix + ".bn");
}

template <typename T>
InvertedResidual<T>::InvertedResidual(std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : expand(in_channels, in_channels, ConvBlockOptions{1, 1, 1, 1, true}, rng),
      depthwise(in_channels, in_channels, ConvBlockOptions{3, 1, 1, in_channels, true}, rng),
      project(in_channels, out_channels, ConvBlockOptions{1, 1, 1, 1, false}, rng),
      skip_(in_channels == out_channels) {}

template <typename T>
Tensor<T> InvertedResidual<T>::forward(const Tensor<T>& input) {
  Tensor<T> y = project.forward(depthwise.forward(expand.forward(input)));
  return skip_ ? add(y, input) : y;
}

template <typename T>
void InvertedResidual<T>::set_mode(Mode mode) {
  expand.set_mode(mode);
  depthwise.set_mode(mode);
  project.set_mode(mode);
}

template <typename T>
void InvertedResidual<T>::collect(ParamStore<T>& store, const std::string& prefix) const {
  expand.collect(store, prefix + ".expand");
  depthwise.collect(store, prefix + ".depthwise");
  project.collect(store, prefix + ".project");
}

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features, Rng& rng, double init_gain)
    : weight(he_normal<T>({out_features, in_features}, in_features, rng, init_gain)), bias({out_features}) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

template <typename T>
void Linear<T>::collect(ParamStore<T>& store, const std::string& prefix) const {
  store.add_parameter(prefix + ".weight", weight);
  store.add_parameter(prefix + ".bias", bias);
}

#define DDUNET_INSTANTIATE(T)                                                          \
  template class ParamStore<T>;                                                        \
  template Tensor<T> he_normal<T>(Shape, std::size_t, Rng&, double);                   \
  template struct BatchNorm2dState<T>;                                                 \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, BatchNorm2dState<T>&);           \
  template class ConvBlock<T>;                                                         \
  template class InvertedResidual<T>;                                                  \
  template class Linear<T>;

DDUNET_INSTANTIATE(float)
DDUNET_INSTANTIATE(double)
#undef DDUNET_INSTANTIATE

}  // namespace ddunet
