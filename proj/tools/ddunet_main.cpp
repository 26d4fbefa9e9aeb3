#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "config_file.hpp"
#include "ddunet/autograd.hpp"
#include "ddunet/checkpoint.hpp"
#include "ddunet/data.hpp"
#include "ddunet/gradcheck.hpp"
#include "ddunet/model.hpp"
#include "ddunet/trainer.hpp"

namespace fs = std::filesystem;
using namespace ddunet;

namespace {

void add_model_flags(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--base-channels", cfg.base_channels, "Width multiplier c")->capture_default_str();
  cmd->add_option("--image-size", cfg.input_size, "Square input size, multiple of 16")->capture_default_str();
  cmd->add_flag("!--no-dmsc", cfg.use_dmsc, "Plain 3x3 ConvBlocks instead of DMSC in the encoder");
  cmd->add_flag("!--no-dwbg", cfg.use_dwbg, "Static 3x3 head conv instead of generated kernels");
  cmd->add_flag("--skip-fuse", cfg.dmsc_skip_fuse, "Bypass the 3x3 fuse conv inside DMSC");
}

void add_data_flags(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--data", cfg.data_dir, "Dataset root holding images/ and GTmaps/")->required();
  cmd->add_option("--seed", cfg.seed, "Seed for split, init and shuffling")->capture_default_str();
  cmd->add_option("--val-ratio", cfg.val_ratio, "Held-out fraction")->capture_default_str();
  cmd->add_option("--batch-size", cfg.batch_size)->capture_default_str();
  cmd->add_option("--threshold", cfg.threshold, "Probability threshold for cloud")->capture_default_str();
  cmd->add_flag("--stratify", cfg.stratify, "Split day/night/synthetic groups separately");
  cmd->add_flag("--deterministic", cfg.deterministic, "No prefetch thread");
  cmd->add_option_function<std::string>(
         "--aggregation", [&cfg](const std::string& s) { cfg.aggregation = parse_aggregation(s); },
         "per_image_mean or global")
      ->check(CLI::IsMember({"per_image_mean", "global"}));
}

void print_report(const EvalReport& report) {
  std::cout << report.overall.to_text();
  for (const auto& [tag, r] : report.by_tag) std::cout << "[" << to_string(tag) << "]\n" << r.to_text();
}

std::vector<fs::path> list_pngs(const fs::path& input) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(input)) return {input};
  const fs::path dir = fs::is_directory(input / "images") ? input / "images" : input;
  if (!fs::is_directory(dir)) throw IoError("no such image or directory '" + input.string() + "'");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no PNG images under '" + dir.string() + "'");
  return files;
}

int run_predict(const fs::path& ckpt, const fs::path& input, const fs::path& out_dir, double threshold) {
  CheckpointMeta meta;
  auto model = load_checkpoint<float>(ckpt, &meta);
  const std::size_t s = meta.config.input_size;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::size_t written = 0;
  for (const fs::path& file : list_pngs(input)) {
    Image original;
    Tensor<float> x({1, 3, s, s}, load_image_tensor(file, s, &original));
    const Tensor<float> mask = predict_mask(*model, x, threshold);
    Image small{s, s, 1, std::vector<std::uint8_t>(s * s)};
    for (std::size_t i = 0; i < s * s; ++i) small.pixels[i] = mask.data()[i] != 0.0f ? 255 : 0;
    write_png(out_dir / (file.stem().string() + ".png"), resize_nearest(small, original.width, original.height));
    ++written;
  }
  std::cout << "wrote " << written << " masks to " << out_dir.string() << "\n";
  return 0;
}

int run_params(const TrainConfig& cfg) {
  DdunetModel<float> model(cfg.model_config(), 0);
  const ParameterCount count = model.count_parameters();
  std::cout << "total=" << count.total << "\n";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(count.total) / 1e6);
  std::cout << "total_millions=" << buf << "\n";
  for (const auto& [name, n] : count.breakdown) std::cout << name << "=" << n << "\n";
  return 0;
}

int run_gradcheck(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(seed);
  std::size_t failed = 0;
  for (const auto& r : results) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-5s %-6s %-32s max_rel_err=%.3e tol=%.0e checked=%zu refined=%zu worst=%s",
                  r.passed() ? "PASS" : "FAIL", to_string(r.level).c_str(), r.name.c_str(), r.max_rel_error,
                  r.tolerance, r.checked, r.refined, r.worst.c_str());
    std::cout << buf << "\n";
    if (!r.passed()) ++failed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "gradcheck: " << results.size() - failed << "/" << results.size() << " passed in " << secs << " s\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DDUNet cloud segmentation: train, evaluate and run the model"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  TrainConfig cfg;
  fs::path out_dir = "run", ckpt;
  SyntheticOptions synth;
  std::uint64_t grad_seed = 1;
  std::vector<double> alphas;

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic sky/cloud dataset");
  synth_cmd->add_option("--out", out_dir, "Output dataset root")->required();
  synth_cmd->add_option("--count", synth.count)->capture_default_str();
  synth_cmd->add_option("--size", synth.size)->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Train from scratch");
  add_data_flags(train_cmd, cfg);
  add_model_flags(train_cmd, cfg);
  train_cmd->add_option("--out", out_dir, "Run directory for log and checkpoints")->capture_default_str();
  train_cmd->add_option("--epochs", cfg.epochs)->capture_default_str();
  train_cmd->add_option("--lr", cfg.lr)->capture_default_str();
  train_cmd->add_option("--lr-gamma", cfg.lr_gamma, "Per-epoch exponential decay")->capture_default_str();
  train_cmd->add_option("--alpha", alphas, "Deep-supervision weights, finest first")->expected(3)->delimiter(',');
  train_cmd->add_flag("--hflip", cfg.hflip, "Random horizontal flips");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on the held-out split");
  add_data_flags(eval_cmd, cfg);
  add_model_flags(eval_cmd, cfg);
  eval_cmd->add_option("--ckpt", ckpt)->required();

  auto* predict_cmd = app.add_subcommand("predict", "Write 0/255 cloud masks");
  predict_cmd->add_option("--ckpt", ckpt)->required();
  predict_cmd->add_option("--data", cfg.data_dir, "PNG file, directory, or dataset root")->required();
  predict_cmd->add_option("--out", out_dir, "Mask directory")->required();
  predict_cmd->add_option("--threshold", cfg.threshold)->capture_default_str();

  auto* params_cmd = app.add_subcommand("params", "Print the parameter count");
  add_model_flags(params_cmd, cfg);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite in double precision");
  grad_cmd->add_option("--seed", grad_seed)->capture_default_str();

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = cli::expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    args.pop_back();  // program name
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (alphas.size() == 3) cfg.loss_weights.alpha = {alphas[0], alphas[1], alphas[2]};
    if (*synth_cmd) {
      const DatasetIndex index = generate_synthetic(synth, out_dir);
      std::cout << "wrote " << index.records.size() << " samples (" << synth.size << "x" << synth.size << ") to "
                << out_dir.string() << "\n";
      return 0;
    }
    if (*train_cmd) {
      cfg.out_dir = out_dir;
      const TrainResult result = train(cfg, &std::cout);
      std::cout << "best_test_miou=" << result.best_miou << " at epoch " << result.best_epoch << "\n"
                << "best_checkpoint=" << result.best_checkpoint.string() << "\n"
                << "final_checkpoint=" << result.final_checkpoint.string() << "\n";
      return 0;
    }
    if (*eval_cmd) {
      print_report(evaluate(cfg, ckpt));
      return 0;
    }
    if (*predict_cmd) return run_predict(ckpt, cfg.data_dir, out_dir, cfg.threshold);
    if (*params_cmd) return run_params(cfg);
    if (*grad_cmd) return run_gradcheck(grad_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
