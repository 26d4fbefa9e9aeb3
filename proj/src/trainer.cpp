#include "ddunet/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "ddunet/autograd.hpp"
#include "ddunet/errors.hpp"
#include "ddunet/loader.hpp"
#include "ddunet/optim.hpp"
#include "ddunet/rng.hpp"

namespace ddunet {
namespace fs = std::filesystem;

DdunetConfig TrainConfig::model_config() const {
  DdunetConfig c;
  c.base_channels = base_channels;
  c.input_size = input_size;
  c.use_dmsc = use_dmsc;
  c.use_dwbg = use_dwbg;
  c.dmsc_skip_fuse = dmsc_skip_fuse;
  return c;
}

void TrainConfig::validate() const {
  model_config().validate();
  loss_weights.validate();
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw ConfigError("lr gamma must lie in (0, 1]");
  if (!(val_ratio >= 0.0 && val_ratio <= 1.0)) throw ConfigError("val ratio must lie in [0, 1]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
}

std::string EpochStats::log_line() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "epoch=%zu, lr=%.9g, train_loss=%.9g, test_miou=%.9g, loss_s1=%.9g, loss_s2=%.9g, loss_s3=%.9g", epoch,
                lr, train_loss, test_miou, stage_losses[0], stage_losses[1], stage_losses[2]);
  return buf;
}

void require_matching_config(const DdunetConfig& expected, const DdunetConfig& stored) {
  std::string diff;
  auto field = [&](const char* name, std::size_t want, std::size_t got) {
    if (want != got) {
      diff += std::string(diff.empty() ? "" : ", ") + name + " " + std::to_string(got) + " (expected " +
              std::to_string(want) + ")";
    }
  };
  field("base_channels", expected.base_channels, stored.base_channels);
  field("input_size", expected.input_size, stored.input_size);
  field("in_channels", expected.in_channels, stored.in_channels);
  field("use_dmsc", expected.use_dmsc, stored.use_dmsc);
  field("use_dwbg", expected.use_dwbg, stored.use_dwbg);
  field("dmsc_skip_fuse", expected.dmsc_skip_fuse, stored.dmsc_skip_fuse);
  if (!diff.empty()) throw ConfigError("checkpoint does not match the configuration: " + diff);
}

EvalReport evaluate_model(DdunetModel<float>& model, const DatasetIndex& index, const std::vector<std::size_t>& ids,
                          const TrainConfig& config) {
  if (ids.empty()) throw DataError("evaluation split is empty");
  const std::size_t size = model.config().input_size;
  const std::size_t plane = size * size;
  std::vector<std::uint8_t> predictions, labels;
  std::vector<SampleTag> tags;
  {
    NoGradGuard<float> no_grad;
    BatchLoader loader(index, make_requests(ids, config.batch_size), size, config.deterministic ? 0 : config.prefetch);
    while (auto batch = loader.next()) {
      const Tensor<float> logits = model.forward(batch->images, Mode::eval).front();
      const Tensor<float> mask = threshold_logits(logits, config.threshold);
      for (float v : mask.data()) predictions.push_back(v != 0.0f ? 1 : 0);
      labels.insert(labels.end(), batch->masks.begin(), batch->masks.end());
      tags.insert(tags.end(), batch->tags.begin(), batch->tags.end());
    }
  }
  EvalReport report;
  report.overall = compute_metrics(predictions, labels, plane, config.aggregation);
  for (SampleTag tag : {SampleTag::day, SampleTag::night}) {
    std::vector<std::uint8_t> p, l;
    for (std::size_t i = 0; i < tags.size(); ++i) {
      if (tags[i] != tag) continue;
      p.insert(p.end(), predictions.begin() + static_cast<long>(i * plane),
               predictions.begin() + static_cast<long>((i + 1) * plane));
      l.insert(l.end(), labels.begin() + static_cast<long>(i * plane), labels.begin() + static_cast<long>((i + 1) * plane));
    }
    if (!p.empty()) report.by_tag.emplace_back(tag, compute_metrics(p, l, plane, config.aggregation));
  }
  return report;
}

namespace {

bool all_finite(const ParamStore<float>& store) {
  for (const auto& [name, t] : store.all()) {
    for (float v : t.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace

TrainResult train_model(DdunetModel<float>& model, const DatasetIndex& index, const TrainConfig& config,
                        std::ostream* echo) {
  config.validate();
  if (index.train.empty()) throw DataError("training split is empty");
  if (index.test.empty()) throw DataError("test split is empty; lower --val-ratio or add samples");
  const std::size_t size = model.config().input_size;

  TrainResult result;
  std::ofstream log_file;
  if (config.save_checkpoints) {
    std::error_code ec;
    fs::create_directories(config.out_dir, ec);
    result.log_path = config.out_dir / "train_log.txt";
    result.best_checkpoint = config.out_dir / "best.ckpt";
    result.final_checkpoint = config.out_dir / "final.ckpt";
    log_file.open(result.log_path, std::ios::trunc);
    if (!log_file) throw IoError("cannot write '" + result.log_path.string() + "'");
  }

  // Separate stream from model init and the split so changing one never shifts the others.
  Rng order_rng(config.seed ^ 0x6a09e667f3bcc908ULL);
  AdamState<float> adam;
  auto& tape = Tape<float>::current();
  tape.clear();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    adam.lr = lr_schedule(epoch, config.lr, config.lr_gamma);
    std::vector<std::size_t> order = index.train;
    order_rng.shuffle(order);
    std::vector<bool> flips;
    if (config.hflip) {
      for (std::size_t i = 0; i < order.size(); ++i) flips.push_back(order_rng.uniform() < 0.5);
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.lr = adam.lr;
    double seen = 0.0;
    std::size_t batch_no = 0;
    BatchLoader loader(index, make_requests(order, config.batch_size, flips), size,
                       config.deterministic ? 0 : config.prefetch);
    while (auto batch = loader.next()) {
      ++batch_no;
      model.params().zero_grad();
      const auto logits = model.forward(batch->images, Mode::train);
      const auto loss = deep_supervision_loss(logits, batch->labels, config.loss_weights);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "non-finite loss at epoch %zu, batch %zu: total=%g, loss_s1=%g, loss_s2=%g, loss_s3=%g",
                      epoch + 1, batch_no, total, loss.stage_losses[0], loss.stage_losses[1], loss.stage_losses[2]);
        tape.clear();
        throw DataError(buf);
      }
      backward(loss.total);
      adam_step(model.params().parameters(), adam);
      tape.clear();

      const double b = static_cast<double>(batch->records.size());
      stats.train_loss += total * b;
      for (std::size_t j = 0; j < 3; ++j) stats.stage_losses[j] += loss.stage_losses[j] * b;
      seen += b;
    }
    stats.train_loss /= seen;
    for (double& s : stats.stage_losses) s /= seen;
    if (!all_finite(model.params())) {
      throw DataError("non-finite parameter after epoch " + std::to_string(epoch + 1));
    }

    stats.test_miou = evaluate_model(model, index, index.test, config).overall.miou;
    result.history.push_back(stats);
    const std::string line = stats.log_line();
    if (log_file.is_open()) log_file << line << '\n' << std::flush;
    if (echo) *echo << line << '\n' << std::flush;

    const CheckpointMeta meta{model.config(), static_cast<std::uint32_t>(epoch + 1), config.seed};
    if (stats.test_miou > result.best_miou) {
      result.best_miou = stats.test_miou;
      result.best_epoch = epoch + 1;
      if (config.save_checkpoints) save_checkpoint(model, result.best_checkpoint, meta);
    }
    if (config.save_checkpoints && epoch + 1 == config.epochs) save_checkpoint(model, result.final_checkpoint, meta);
  }
  model.set_mode(Mode::eval);
  return result;
}

TrainResult train(const TrainConfig& config, std::ostream* echo) {
  config.validate();
  const DatasetIndex index = load_dataset(config.data_dir, config.val_ratio, config.seed, config.stratify);
  DdunetModel<float> model(config.model_config(), config.seed);
  return train_model(model, index, config, echo);
}

EvalReport evaluate(const TrainConfig& config, const fs::path& checkpoint) {
  config.validate();
  require_matching_config(config.model_config(), read_checkpoint_meta(checkpoint).config);
  auto model = load_checkpoint<float>(checkpoint);
  const DatasetIndex index = load_dataset(config.data_dir, config.val_ratio, config.seed, config.stratify);
  return evaluate_model(*model, index, index.test, config);
}

}  // namespace ddunet
