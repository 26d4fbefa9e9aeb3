#include "ddunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "ddunet/autograd.hpp"
#include "ddunet/dmsc.hpp"
#include "ddunet/dwbg.hpp"
#include "ddunet/losses.hpp"
#include "ddunet/model.hpp"
#include "ddunet/nn_blocks.hpp"
#include "ddunet/ops.hpp"
#include "ddunet/rng.hpp"

namespace ddunet {

std::string to_string(GradcheckLevel level) {
  switch (level) {
    case GradcheckLevel::op: return "op";
    case GradcheckLevel::block: return "block";
    case GradcheckLevel::model: break;
  }
  return "model";
}

double gradcheck_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double project(const Tensor<double>& out, const std::vector<double>& r) {
  if (out.numel() != r.size()) throw ContractError("gradcheck: output size changed between evaluations");
  double acc = 0.0;
  auto d = out.data();
  for (std::size_t i = 0; i < r.size(); ++i) acc += d[i] * r[i];
  return acc;
}

}  // namespace

GradcheckResult check_gradients(const std::string& name, GradcheckLevel level, double tolerance,
                                const std::vector<std::pair<std::string, Tensor<double>>>& inputs,
                                const std::function<Tensor<double>()>& fn, const GradcheckOptions& options) {
  GradcheckResult result;
  result.name = name;
  result.level = level;
  result.tolerance = tolerance;
  Rng rng(options.seed);
  auto& tape = Tape<double>::current();
  tape.clear();

  for (const auto& [n, t] : inputs) {
    Tensor<double> h = t;
    h.set_requires_grad(true);
    h.zero_grad();
  }
  const Tensor<double> out = fn();
  std::vector<double> r(out.numel());
  for (double& v : r) v = rng.normal();
  const Tensor<double> loss = sum(mul(out, Tensor<double>(out.shape(), r)));
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& [n, t] : inputs) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }
  tape.clear();

  NoGradGuard<double> no_grad;
  const double h = options.step;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double> t = inputs[i].second;
    std::vector<std::size_t> entries(t.numel());
    for (std::size_t k = 0; k < entries.size(); ++k) entries[k] = k;
    if (options.max_entries_per_tensor > 0 && entries.size() > options.max_entries_per_tensor) {
      rng.shuffle(entries);
      entries.resize(options.max_entries_per_tensor);
    }
    auto data = t.mutable_data();
    for (std::size_t k : entries) {
      const double x = data[k];
      auto central = [&](double step) {
        data[k] = x + step;
        const double plus = project(fn(), r);
        data[k] = x - step;
        const double minus = project(fn(), r);
        data[k] = x;
        return gradcheck_relative_error(analytic[i][k], (plus - minus) / (2.0 * step), options.floor);
      };
      double err = central(h);
      if (err >= tolerance) {
        // A relu kink inside [x - h, x + h] spoils the difference; a wrong
        // gradient stays wrong at every step.
        for (double step = h / 10; step >= h / 100 && err >= tolerance; step /= 10) err = std::min(err, central(step));
        ++result.refined;
      }
      if (err > result.max_rel_error || result.checked == 0) {
        result.max_rel_error = err;
        result.worst = inputs[i].first + "[" + std::to_string(k) + "]";
      }
      ++result.checked;
    }
  }
  return result;
}

namespace {

using Inputs = std::vector<std::pair<std::string, Tensor<double>>>;

Tensor<double> uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// Magnitudes in [0.1, 1] with random sign: keeps relu away from its kink.
Tensor<double> off_zero(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.mutable_data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return t;
}

Inputs with_params(const ParamStore<double>& store, Inputs extra) {
  for (const auto& [n, t] : store.parameters()) extra.emplace_back(n, t);
  return extra;
}

void randomize_running_stats(BatchNorm2dState<double>& bn, Rng& rng) {
  for (double& v : bn.running_mean.mutable_data()) v = rng.uniform(-0.3, 0.3);
  for (double& v : bn.running_var.mutable_data()) v = rng.uniform(0.5, 1.5);
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradcheckResult> results;
  Rng rng(seed);
  GradcheckOptions opts;
  opts.seed = seed;
  const auto op = GradcheckLevel::op;
  const auto block = GradcheckLevel::block;
  auto add_case = [&](const std::string& name, GradcheckLevel level, const Inputs& inputs,
                      const std::function<Tensor<double>()>& fn, const GradcheckOptions& o) {
    const double tol = level == GradcheckLevel::model ? kModelTolerance : kOpTolerance;
    results.push_back(check_gradients(name, level, tol, inputs, fn, o));
  };

  struct ConvCase {
    const char* name;
    Conv2dOptions o;
    std::size_t in, out;
    bool bias;
  };
  const ConvCase conv_cases[] = {
      {"conv2d", {1, 1, 1, 1}, 4, 3, true},
      {"conv2d_stride2", {2, 1, 1, 1}, 4, 3, true},
      {"conv2d_dilation2", {1, 2, 2, 1}, 4, 4, false},
      {"conv2d_groups2", {1, 1, 1, 2}, 4, 6, true},
      {"conv2d_depthwise", {1, 1, 1, 4}, 4, 4, false},
      {"conv2d_stride2_nopad_groups2", {2, 0, 1, 2}, 4, 2, true},
  };
  for (const auto& c : conv_cases) {
    const std::size_t k = c.o.padding == 0 && c.o.stride == 2 ? 1 : 3;
    Tensor<double> x = uniform({2, c.in, 5, 5}, rng);
    Tensor<double> w = uniform({c.out, c.in / c.o.groups, k, k}, rng);
    Tensor<double> b = c.bias ? uniform({c.out}, rng) : Tensor<double>();
    Inputs in{{"x", x}, {"w", w}};
    if (c.bias) in.emplace_back("b", b);
    const Conv2dOptions o = c.o;
    add_case(c.name, op, in, [=] { return conv2d(x, w, b, o); }, opts);
  }

  {
    Tensor<double> x = off_zero({2, 3, 4, 4}, rng);
    add_case("relu", op, {{"x", x}}, [=] { return relu(x); }, opts);
  }
  {
    Tensor<double> x = uniform({2, 3, 4, 4}, rng, -4.0, 4.0);
    add_case("sigmoid", op, {{"x", x}}, [=] { return sigmoid(x); }, opts);
  }
  {
    Tensor<double> x = uniform({3, 4}, rng, -3.0, 3.0);
    add_case("softmax", op, {{"x", x}}, [=] { return softmax(x); }, opts);
  }
  {
    Tensor<double> x = uniform({3, 5}, rng), w = uniform({4, 5}, rng), b = uniform({4}, rng);
    add_case("linear", op, {{"x", x}, {"w", w}, {"b", b}}, [=] { return linear(x, w, b); }, opts);
  }
  {
    Tensor<double> x = uniform({2, 3, 4, 5}, rng);
    add_case("adaptive_avg_pool_to_1", op, {{"x", x}}, [=] { return adaptive_avg_pool_to_1(x); }, opts);
  }
  {
    Tensor<double> x = uniform({2, 2, 3, 4}, rng);
    add_case("bilinear_upsample_2x", op, {{"x", x}}, [=] { return bilinear_upsample_2x(x); }, opts);
  }
  {
    Tensor<double> a = uniform({2, 2, 3, 3}, rng), b = uniform({2, 3, 3, 3}, rng);
    add_case("concat_channels", op, {{"a", a}, {"b", b}}, [=] { return concat_channels(a, b); }, opts);
  }
  {
    Tensor<double> x = uniform({2, 5, 3, 3}, rng);
    add_case("slice_channels", op, {{"x", x}}, [=] { return slice_channels(x, 1, 4); }, opts);
  }
  {
    Tensor<double> x = uniform({2, 3, 4}, rng);
    add_case("reshape", op, {{"x", x}}, [=] { return reshape(x, {6, 4}); }, opts);
  }
  {
    Tensor<double> a = uniform({2, 3, 3, 3}, rng), b = uniform({2, 3, 3, 3}, rng);
    add_case("add", op, {{"a", a}, {"b", b}}, [=] { return add(a, b); }, opts);
    add_case("mul", op, {{"a", a}, {"b", b}}, [=] { return mul(a, b); }, opts);
    add_case("scale", op, {{"a", a}}, [=] { return scale(a, 0.7); }, opts);
    add_case("sum", op, {{"a", a}}, [=] { return sum(a); }, opts);
  }
  {
    std::vector<Tensor<double>> branches;
    Inputs in;
    for (int r = 0; r < 4; ++r) {
      branches.push_back(uniform({2, 3, 4, 4}, rng));
      in.emplace_back("branch" + std::to_string(r + 1), branches.back());
    }
    Tensor<double> w = uniform({2, 4}, rng, 0.0, 1.0);
    in.emplace_back("weights", w);
    add_case("gated_sum", op, in, [=] { return gated_sum<double>(branches, w); }, opts);
  }
  {
    auto bn = std::make_shared<BatchNorm2dState<double>>(2);
    bn->gamma = uniform({2}, rng, 0.5, 1.5);
    bn->beta = uniform({2}, rng);
    Tensor<double> x = uniform({3, 2, 4, 4}, rng);
    add_case("batchnorm2d_train", op, {{"x", x}, {"gamma", bn->gamma}, {"beta", bn->beta}}, [=] {
      bn->mode = Mode::train;
      return batchnorm2d(x, *bn);
    }, opts);
  }
  {
    auto bn = std::make_shared<BatchNorm2dState<double>>(2);
    bn->gamma = uniform({2}, rng, 0.5, 1.5);
    bn->beta = uniform({2}, rng);
    randomize_running_stats(*bn, rng);
    Tensor<double> x = uniform({1, 2, 4, 4}, rng);
    add_case("batchnorm2d_eval", op, {{"x", x}, {"gamma", bn->gamma}, {"beta", bn->beta}}, [=] {
      bn->mode = Mode::eval;
      return batchnorm2d(x, *bn);
    }, opts);
  }
  {
    Tensor<double> p = uniform({2, 1, 4, 4}, rng, 0.05, 0.95);
    Tensor<double> y({2, 1, 4, 4});
    for (double& v : y.mutable_data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    add_case("bce_loss", op, {{"p", p}}, [=] { return bce_loss(p, y); }, opts);
  }
  {
    Tensor<double> x = uniform({2, 3, 5, 5}, rng), w = uniform({2, 1, 3, 3, 3}, rng), b = uniform({2, 1}, rng);
    add_case("dynamic_conv", op, {{"x", x}, {"w", w}, {"b", b}}, [=] { return dynamic_conv(x, w, b); }, opts);
  }

  // Blocks, with BN in train mode on B=2 batches.
  {
    auto blk = std::make_shared<ConvBlock<double>>(3, 4, ConvBlockOptions{}, rng);
    ParamStore<double> store;
    blk->collect(store, "conv_block");
    Tensor<double> x = uniform({2, 3, 5, 5}, rng);
    add_case("ConvBlock", block, with_params(store, {{"x", x}}), [=] { return blk->forward(x); }, opts);
  }
  {
    auto blk = std::make_shared<ConvBlock<double>>(4, 4, ConvBlockOptions{3, 2, 1, 1, true}, rng);
    ParamStore<double> store;
    blk->collect(store, "conv_block_s2");
    Tensor<double> x = uniform({2, 4, 6, 6}, rng);
    add_case("ConvBlock_stride2", block, with_params(store, {{"x", x}}), [=] { return blk->forward(x); }, opts);
  }
  {
    auto blk = std::make_shared<DWConvBlock<double>>(3, 2, rng);
    ParamStore<double> store;
    blk->collect(store, "dw_block");
    Tensor<double> x = uniform({2, 3, 6, 6}, rng);
    add_case("DWConvBlock_dilation2", block, with_params(store, {{"x", x}}), [=] { return blk->forward(x); }, opts);
  }
  for (std::size_t out : {3u, 5u}) {
    auto blk = std::make_shared<InvertedResidual<double>>(3, out, rng);
    ParamStore<double> store;
    blk->collect(store, "ir");
    Tensor<double> x = uniform({2, 3, 4, 4}, rng);
    add_case(out == 3 ? "InvertedResidual_skip" : "InvertedResidual", block, with_params(store, {{"x", x}}),
             [=] { return blk->forward(x); }, opts);
  }
  {
    auto lin = std::make_shared<Linear<double>>(5, 3, rng);
    ParamStore<double> store;
    lin->collect(store, "linear");
    Tensor<double> x = uniform({4, 5}, rng);
    add_case("Linear", block, with_params(store, {{"x", x}}), [=] { return lin->forward(x); }, opts);
  }
  for (bool skip_fuse : {false, true}) {
    auto blk = std::make_shared<DmscBlock<double>>(4, rng, skip_fuse);
    ParamStore<double> store;
    blk->collect(store, "dmsc");
    Tensor<double> x = uniform({2, 4, 6, 6}, rng);
    add_case(skip_fuse ? "DMSC_skip_fuse" : "DMSC", block, with_params(store, {{"x", x}}),
             [=] { return blk->forward(x); }, opts);
  }
  {
    auto head = std::make_shared<DwbgHead<double>>(3, rng);
    ParamStore<double> store;
    head->collect(store, "dwbg");
    Tensor<double> enc = uniform({2, 3, 5, 5}, rng), dec = uniform({2, 3, 5, 5}, rng);
    add_case("DWBG_head", block, with_params(store, {{"enc", enc}, {"dec", dec}}),
             [=] { return head->forward(enc, dec); }, opts);
  }
  {
    std::vector<Tensor<double>> logits = {uniform({2, 1, 2, 2}, rng), uniform({2, 1, 4, 4}, rng),
                                          uniform({2, 1, 8, 8}, rng)};
    Tensor<double> y({2, 1, 8, 8});
    for (double& v : y.mutable_data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    add_case("deep_supervision_loss", block, {{"s4", logits[0]}, {"s2", logits[1]}, {"s1", logits[2]}},
             [=] { return deep_supervision_loss(logits, y, LossWeights{}).total; }, opts);
  }

  // Full model at B=1: BN runs on (randomised) running statistics, since a
  // 1x1 bottleneck with one sample has no batch statistics.
  for (bool full : {true, false}) {
    DdunetConfig cfg;
    cfg.base_channels = 2;
    cfg.input_size = 16;
    cfg.use_dmsc = full;
    cfg.use_dwbg = full;
    auto model = std::make_shared<DdunetModel<double>>(cfg, seed);
    model->set_mode(Mode::eval);
    for (const auto& [n, t] : model->params().buffers()) {
      Tensor<double> h = t;
      const bool is_var = n.size() > 3 && n.compare(n.size() - 3, 3, "var") == 0;
      for (double& v : h.mutable_data()) v = is_var ? rng.uniform(0.5, 1.5) : rng.uniform(-0.2, 0.2);
    }
    Tensor<double> x = uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    Tensor<double> y({1, 1, 16, 16});
    for (double& v : y.mutable_data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    GradcheckOptions mo = opts;
    mo.max_entries_per_tensor = 32;
    mo.step = 1e-5;  // hundreds of relu units: a smaller step straddles fewer kinks
    add_case(full ? "DDUNet_c2_s16" : "DDUNet_baseline_c2_s16", GradcheckLevel::model,
             with_params(model->params(), {{"images", x}}), [=] {
               return deep_supervision_loss(model->forward_all_stages(x), y, LossWeights{}).total;
             }, mo);
  }
  return results;
}

}  // namespace ddunet
