#include "ddunet/model.hpp"

#include <cmath>
#include <map>

namespace ddunet {

void DdunetConfig::validate() const {
  if (base_channels < 2) throw ConfigError("model: base_channels must be >= 2, got " + std::to_string(base_channels));
  if (input_size < 16 || input_size % 16 != 0) {
    throw ConfigError("model: input_size must be a multiple of 16 and >= 16, got " + std::to_string(input_size));
  }
  if (in_channels != 3) throw ConfigError("model: in_channels must be 3");
}

namespace {

const DdunetConfig& validated(const DdunetConfig& config) {
  config.validate();
  return config;
}

template <typename T>
Tensor<T> he_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  Tensor<T> w = he_normal<T>({out, in, k, k}, in * k * k, rng);
  w.set_requires_grad(true);
  return w;
}

}  // namespace

template <typename T>
DdunetModel<T>::DdunetModel(const DdunetConfig& config, std::uint64_t seed)
    : config_(validated(config)),
      init_rng_(seed),
      stem(config.in_channels, config.base_channels, ConvBlockOptions{3, 1, 1, 1, true}, init_rng_) {
  const std::size_t c = config_.base_channels;
  const std::size_t widths[4] = {c, 2 * c, 4 * c, 8 * c};
  const std::size_t next[4] = {2 * c, 4 * c, 8 * c, 8 * c};
  for (std::size_t s = 0; s < 4; ++s) {
    EncoderStage<T> stage;
    if (config_.use_dmsc) {
      stage.dmsc = std::make_unique<DmscBlock<T>>(widths[s], init_rng_, config_.dmsc_skip_fuse);
    } else {
      stage.plain.emplace_back(widths[s], widths[s], ConvBlockOptions{3, 1, 1, 1, true}, init_rng_);
      stage.plain.emplace_back(widths[s], widths[s], ConvBlockOptions{3, 1, 1, 1, true}, init_rng_);
    }
    stage.down = std::make_unique<ConvBlock<T>>(widths[s], next[s], ConvBlockOptions{3, 2, 1, 1, true}, init_rng_);
    encoder.push_back(std::move(stage));
  }

  const std::size_t outs[4] = {8 * c, 4 * c, 2 * c, c};
  const std::size_t ins[4] = {8 * c, 8 * c + 8 * c, 4 * c + 4 * c, 2 * c + 2 * c};
  for (std::size_t d = 0; d < 4; ++d) {
    const std::size_t inner = kDecoderWidthFactor * outs[d];
    DecoderStage<T> stage;
    stage.reduce = std::make_unique<ConvBlock<T>>(ins[d], inner, ConvBlockOptions{1, 1, 1, 1, true}, init_rng_);
    stage.first = std::make_unique<InvertedResidual<T>>(inner, inner, init_rng_);
    stage.second = std::make_unique<InvertedResidual<T>>(inner, outs[d], init_rng_);
    decoder.push_back(std::move(stage));
  }

  for (std::size_t d = 1; d < 4; ++d) {
    SupervisionHead<T> head;
    if (config_.use_dwbg) {
      head.dynamic = std::make_unique<DwbgHead<T>>(outs[d], init_rng_);
    } else {
      head.static_weight = he_conv<T>(1, outs[d], 3, init_rng_);
      head.static_bias = Tensor<T>({1});
      head.static_bias.set_requires_grad(true);
    }
    heads.push_back(std::move(head));
  }

  stem.collect(store_, "stem");
  for (std::size_t s = 0; s < encoder.size(); ++s) {
    const std::string n = std::to_string(s + 1);
    if (encoder[s].dmsc) encoder[s].dmsc->collect(store_, "enc" + n);
    for (std::size_t i = 0; i < encoder[s].plain.size(); ++i) {
      encoder[s].plain[i].collect(store_, "enc" + n + ".conv" + std::to_string(i + 1));
    }
    encoder[s].down->collect(store_, "down" + n);
  }
  for (std::size_t d = 0; d < decoder.size(); ++d) {
    const std::string n = "dec" + std::to_string(d + 1);
    decoder[d].reduce->collect(store_, n + ".reduce");
    decoder[d].first->collect(store_, n + ".ir1");
    decoder[d].second->collect(store_, n + ".ir2");
  }
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const std::string n = "head" + std::to_string(h + 1);
    if (heads[h].dynamic) {
      heads[h].dynamic->collect(store_, n);
    } else {
      store_.add_parameter(n + ".conv.weight", heads[h].static_weight);
      store_.add_parameter(n + ".conv.bias", heads[h].static_bias);
    }
  }
}

template <typename T>
std::vector<Tensor<T>> DdunetModel<T>::forward(const Tensor<T>& images, Mode mode) {
  set_mode(mode);
  return run(images, mode == Mode::train);
}

template <typename T>
std::vector<Tensor<T>> DdunetModel<T>::forward_all_stages(const Tensor<T>& images) {
  return run(images, true);
}

template <typename T>
Tensor<T> DdunetModel<T>::run_head(std::size_t index, const Tensor<T>& skip, const Tensor<T>& features) {
  SupervisionHead<T>& h = heads[index];
  if (h.dynamic) return h.dynamic->forward(skip, features);
  return conv2d(features, h.static_weight, h.static_bias, Conv2dOptions{1, 1, 1, 1});
}

template <typename T>
std::vector<Tensor<T>> DdunetModel<T>::run(const Tensor<T>& images, bool all_stages) {
  const std::size_t s = config_.input_size;
  if (!images.defined() || images.rank() != 4 || images.dim(1) != config_.in_channels || images.dim(2) != s ||
      images.dim(3) != s) {
    throw ConfigError("model: expected images of shape (B, 3, " + std::to_string(s) + ", " + std::to_string(s) +
                      "), got " + (images.defined() ? shape_str(images.shape()) : std::string("<undefined>")));
  }
  Tensor<T> x = stem.forward(images);
  std::vector<Tensor<T>> skips;
  for (auto& stage : encoder) {
    Tensor<T> f;
    if (stage.dmsc) {
      f = stage.dmsc->forward(x);
    } else {
      f = stage.plain[1].forward(stage.plain[0].forward(x));
    }
    skips.push_back(f);
    x = stage.down->forward(f);
  }

  std::vector<Tensor<T>> outputs;
  for (std::size_t d = 0; d < decoder.size(); ++d) {
    if (d > 0) x = concat_channels(x, skips[decoder.size() - d]);
    DecoderStage<T>& stage = decoder[d];
    x = bilinear_upsample_2x(stage.second->forward(stage.first->forward(stage.reduce->forward(x))));
    if (d == 0) continue;
    const std::size_t head = d - 1;
    // Partner encoder feature sits at this stage's output resolution.
    if (all_stages || head + 1 == heads.size()) outputs.push_back(run_head(head, skips[decoder.size() - 1 - d], x));
  }
  return outputs;
}

template <typename T>
void DdunetModel<T>::set_mode(Mode mode) {
  mode_ = mode;
  stem.set_mode(mode);
  for (auto& stage : encoder) {
    if (stage.dmsc) stage.dmsc->set_mode(mode);
    for (auto& p : stage.plain) p.set_mode(mode);
    stage.down->set_mode(mode);
  }
  for (auto& stage : decoder) {
    stage.reduce->set_mode(mode);
    stage.first->set_mode(mode);
    stage.second->set_mode(mode);
  }
}

template <typename T>
ParameterCount DdunetModel<T>::count_parameters() const {
  ParameterCount count;
  std::map<std::string, std::size_t> index;
  for (const auto& p : store_.parameters()) {
    const std::string module = p.name.substr(0, p.name.find('.'));
    auto it = index.find(module);
    if (it == index.end()) {
      index.emplace(module, count.breakdown.size());
      count.breakdown.emplace_back(module, 0);
      it = index.find(module);
    }
    count.breakdown[it->second].second += p.tensor.numel();
    count.total += p.tensor.numel();
  }
  return count;
}

template <typename T>
Tensor<T> threshold_logits(const Tensor<T>& logits, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("predict: threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  Tensor<T> mask(logits.shape());
  auto x = logits.data();
  auto m = mask.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T p = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i])) : std::exp(x[i]) / (T(1) + std::exp(x[i]));
    m[i] = static_cast<double>(p) >= threshold ? T(1) : T(0);
  }
  return mask;
}

template <typename T>
Tensor<T> predict_mask(DdunetModel<T>& model, const Tensor<T>& images, double threshold) {
  NoGradGuard<T> no_grad;
  return threshold_logits(model.forward(images, Mode::eval).back(), threshold);
}

template class DdunetModel<float>;
template class DdunetModel<double>;
template Tensor<float> predict_mask(DdunetModel<float>&, const Tensor<float>&, double);
template Tensor<double> predict_mask(DdunetModel<double>&, const Tensor<double>&, double);
template Tensor<float> threshold_logits(const Tensor<float>&, double);
template Tensor<double> threshold_logits(const Tensor<double>&, double);

}  // namespace ddunet
