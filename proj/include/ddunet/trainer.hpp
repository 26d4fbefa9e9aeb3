#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "ddunet/checkpoint.hpp"
#include "ddunet/data.hpp"
#include "ddunet/losses.hpp"
#include "ddunet/metrics.hpp"
#include "ddunet/model.hpp"

namespace ddunet {

struct TrainConfig {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir = "run";
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double lr_gamma = 0.95;
  std::size_t base_channels = 8;
  std::size_t input_size = 256;
  std::uint64_t seed = 0;
  double val_ratio = 0.1;
  double threshold = 0.5;
  LossWeights loss_weights;
  Aggregation aggregation = Aggregation::per_image_mean;
  bool use_dmsc = true;
  bool use_dwbg = true;
  bool dmsc_skip_fuse = false;
  bool stratify = false;
  bool hflip = false;
  // Decode batches on the training thread instead of a prefetch worker.
  bool deterministic = false;
  std::size_t prefetch = 4;
  bool save_checkpoints = true;

  DdunetConfig model_config() const;
  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  std::array<double, 3> stage_losses{};  // finest first
  double test_miou = 0.0;

  /// `epoch=1, lr=0.001, train_loss=..., test_miou=..., loss_s1=..., loss_s2=..., loss_s3=...`
  std::string log_line() const;
};

struct TrainResult {
  std::vector<EpochStats> history;
  double best_miou = -1.0;
  std::size_t best_epoch = 0;
  std::filesystem::path best_checkpoint, final_checkpoint, log_path;
};

struct EvalReport {
  MetricsReport overall;
  std::vector<std::pair<SampleTag, MetricsReport>> by_tag;  // day / night, when present
};

/// Loads the dataset, builds a fresh model from config.seed and trains it.
/// Writes `<out>/train_log.txt`, `<out>/best.ckpt` and `<out>/final.ckpt`;
/// each log line is also echoed to `echo` when given.
TrainResult train(const TrainConfig& config, std::ostream* echo = nullptr);

/// Trains an existing model on `index.train`, scoring `index.test` after every epoch.
TrainResult train_model(DdunetModel<float>& model, const DatasetIndex& index, const TrainConfig& config,
                        std::ostream* echo = nullptr);

/// Eval-mode forward and thresholding over `ids`, in batches.
EvalReport evaluate_model(DdunetModel<float>& model, const DatasetIndex& index, const std::vector<std::size_t>& ids,
                          const TrainConfig& config);

/// Loads `checkpoint`, refuses it unless its architecture matches `config`,
/// and scores the test split of `config.data_dir`.
EvalReport evaluate(const TrainConfig& config, const std::filesystem::path& checkpoint);

/// ConfigError listing every differing field.
void require_matching_config(const DdunetConfig& expected, const DdunetConfig& stored);

}  // namespace ddunet
