#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ddunet/dmsc.hpp"
#include "ddunet/dwbg.hpp"
#include "ddunet/nn_blocks.hpp"

namespace ddunet {

struct DdunetConfig {
  std::size_t base_channels = 8;
  std::size_t input_size = 256;
  std::size_t in_channels = 3;
  bool dmsc_skip_fuse = false;
  // Ablation switches. Off = two 3x3 ConvBlocks per encoder stage / a static 3x3 head conv.
  bool use_dmsc = true;
  bool use_dwbg = true;

  void validate() const;
  bool operator==(const DdunetConfig&) const = default;
};

// Decoder stage d reduces its (concatenated) input to this multiple of its
// output width before the two inverted residuals. Sole knob for the overall
// parameter budget; 3 puts base_channels=8 at 347,091 parameters.
inline constexpr std::size_t kDecoderWidthFactor = 3;

struct ParameterCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> breakdown;  // top-level module -> count
};

template <typename T>
struct EncoderStage {
  std::unique_ptr<DmscBlock<T>> dmsc;          // use_dmsc
  std::vector<ConvBlock<T>> plain;             // !use_dmsc: two 3x3 ConvBlocks
  std::unique_ptr<ConvBlock<T>> down;          // stride-2 3x3 ConvBlock
};

template <typename T>
struct DecoderStage {
  std::unique_ptr<ConvBlock<T>> reduce;
  std::unique_ptr<InvertedResidual<T>> first;
  std::unique_ptr<InvertedResidual<T>> second;
};

template <typename T>
struct SupervisionHead {
  std::unique_ptr<DwbgHead<T>> dynamic;   // use_dwbg
  Tensor<T> static_weight, static_bias;   // !use_dwbg
};

/// DDUNet.
///
/// Widths with c = base_channels: stem 3 -> c; encoder stage s holds a DMSC
/// at {c, 2c, 4c, 8c} and a stride-2 ConvBlock to {2c, 4c, 8c, 8c}, leaving an
/// 8c bottleneck at S/16. Decoder stage 1 takes the bottleneck; stages 2..4
/// first concatenate the encoder output at their input resolution. Each stage
/// is 1x1 reduce -> two inverted residuals -> bilinear 2x, emitting
/// {8c, 4c, 2c, c} at S/8 .. S. Stages 2..4 feed the three supervision heads,
/// each paired with the encoder feature of matching resolution and width.
template <typename T>
class DdunetModel {
  // Declared first: initialised before the blocks that draw from init_rng_.
  DdunetConfig config_;
  Rng init_rng_;

 public:
  DdunetModel(const DdunetConfig& config, std::uint64_t seed);
  DdunetModel(const DdunetModel&) = delete;
  DdunetModel& operator=(const DdunetModel&) = delete;

  /// Sets BN mode, then returns [S/4, S/2, S] logits in train mode or only
  /// the S logits in eval mode.
  std::vector<Tensor<T>> forward(const Tensor<T>& images, Mode mode);
  /// All three supervised logits maps under the current BN mode, coarsest first.
  std::vector<Tensor<T>> forward_all_stages(const Tensor<T>& images);

  void set_mode(Mode mode);
  Mode mode() const { return mode_; }

  const DdunetConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  ParameterCount count_parameters() const;

  ConvBlock<T> stem;
  std::vector<EncoderStage<T>> encoder;
  std::vector<DecoderStage<T>> decoder;
  std::vector<SupervisionHead<T>> heads;

 private:
  std::vector<Tensor<T>> run(const Tensor<T>& images, bool all_stages);
  Tensor<T> run_head(std::size_t index, const Tensor<T>& skip, const Tensor<T>& features);

  Mode mode_ = Mode::train;
  ParamStore<T> store_;
};

/// Eval-mode binary masks: sigmoid(final logits) >= threshold -> 1, else 0.
template <typename T>
Tensor<T> predict_mask(DdunetModel<T>& model, const Tensor<T>& images, double threshold);

/// Thresholds logits directly; the same rule predict_mask applies.
template <typename T>
Tensor<T> threshold_logits(const Tensor<T>& logits, double threshold);

extern template class DdunetModel<float>;
extern template class DdunetModel<double>;

}  // namespace ddunet
