#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "ddunet/dmsc.hpp"
#include "ddunet/dwbg.hpp"
#include "ddunet/gradcheck.hpp"
#include "ddunet/nn_blocks.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ddunet;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::to_double;

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Non-trivial BN affine and running stats for every BN in the store.
template <typename T>
void randomize_bn(const ParamStore<T>& store, Rng& rng) {
  for (const auto& nt : store.all()) {
    Tensor<T> t = nt.tensor;
    if (ends_with(nt.name, ".running_var") || ends_with(nt.name, ".gamma")) {
      for (T& v : t.mutable_data()) v = static_cast<T>(rng.uniform(0.5, 1.5));
    } else if (ends_with(nt.name, ".running_mean") || ends_with(nt.name, ".beta")) {
      for (T& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-0.3, 0.3));
    }
  }
}

template <typename T>
void randomize_bn(const BatchNorm2dState<T>& bn, Rng& rng) {
  ParamStore<T> s;
  bn.collect(s, "bn");
  randomize_bn(s, rng);
}

// Eval-mode BN on plain vectors.
std::vector<double> bn_eval(std::vector<double> x, const BatchNorm2dState<double>& bn, std::size_t b, std::size_t hw) {
  const std::size_t c = bn.channels();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < hw; ++k) {
        double& v = x[(i * c + ch) * hw + k];
        v = bn.gamma.data()[ch] * (v - bn.running_mean.data()[ch]) / std::sqrt(bn.running_var.data()[ch] + bn.epsilon) +
            bn.beta.data()[ch];
      }
  return x;
}

std::vector<double> relu_v(std::vector<double> x) {
  for (double& v : x) v = std::max(v, 0.0);
  return x;
}

std::vector<double> add_v(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// conv -> eval BN -> optional relu, entirely through the oracles.
std::vector<double> conv_block_oracle(const std::vector<double>& x, const ConvBlock<double>& blk, std::size_t b,
                                      std::size_t h, std::size_t w) {
  const auto& o = blk.conv_options();
  const std::size_t k = blk.weight.dim(2);
  const oracle::ConvShape s{b, blk.in_channels(), h, w, blk.out_channels(), k, k, o.stride, o.padding, o.dilation, o.groups};
  auto y = bn_eval(oracle::conv2d(x, to_double(blk.weight), {}, s), blk.bn, b,
                   static_cast<std::size_t>(s.out_h() * s.out_w()));
  return blk.relu ? relu_v(y) : y;
}

std::vector<double> pool_v(const std::vector<double>& x, std::size_t planes, std::size_t hw) {
  std::vector<double> y(planes, 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t k = 0; k < hw; ++k) y[p] += x[p * hw + k];
    y[p] /= static_cast<double>(hw);
  }
  return y;
}

}  // namespace

TEST(BatchNorm, TrainModeNormalisesPerChannel) {
  Rng rng(1);
  auto x = random_tensor<double>({4, 3, 5, 5}, rng, -2.0, 5.0);
  BatchNorm2dState<double> bn(3);
  auto y = batchnorm2d(x, bn);
  const auto s = oracle::batch_stats(to_double(y), 4, 3, 25);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(s.mean[c], 0.0, 1e-5);
    EXPECT_NEAR(s.var_biased[c], 1.0, 1e-3);
  }
}

TEST(BatchNorm, TrainModeMatchesTwoPassOracleAndUpdatesRunningStats) {
  Rng rng(2);
  auto x = random_tensor<float>({3, 4, 6, 5}, rng, -1.0, 3.0);
  BatchNorm2dState<float> bn(4);
  randomize_bn(bn, rng);
  std::vector<double> rm0 = to_double(bn.running_mean), rv0 = to_double(bn.running_var);
  auto y = batchnorm2d(x, bn);
  const auto s = oracle::batch_stats(to_double(x), 3, 4, 30);
  std::vector<double> ref = to_double(x);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t k = 0; k < 30; ++k) {
        double& v = ref[(b * 4 + c) * 30 + k];
        v = bn.gamma.data()[c] * (v - s.mean[c]) / std::sqrt(s.var_biased[c] + 1e-5) + bn.beta.data()[c];
      }
  EXPECT_LT(max_abs_diff(to_double(y), ref), 1e-5);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(bn.running_mean.data()[c], 0.9 * rm0[c] + 0.1 * s.mean[c], 1e-5);
    EXPECT_NEAR(bn.running_var.data()[c], 0.9 * rv0[c] + 0.1 * s.var_unbiased[c], 1e-5);
    EXPECT_GE(bn.running_var.data()[c], 0.0f);
  }
}

TEST(BatchNorm, EvalModeIdentityConfiguration) {
  Rng rng(3);
  auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  BatchNorm2dState<double> bn(3);
  bn.mode = Mode::eval;
  bn.epsilon = 1e-12;
  EXPECT_LT(max_abs_diff(to_double(batchnorm2d(x, bn)), to_double(x)), 1e-9);
}

TEST(BatchNorm, EvalModeIsAffineAndLeavesStatsAlone) {
  Rng rng(4);
  BatchNorm2dState<double> bn(2);
  randomize_bn(bn, rng);
  bn.mode = Mode::eval;
  const auto rm = to_double(bn.running_mean);
  auto a = random_tensor<double>({1, 2, 3, 3}, rng), b = random_tensor<double>({1, 2, 3, 3}, rng);
  const auto ya = to_double(batchnorm2d(a, bn)), yb = to_double(batchnorm2d(b, bn));
  const auto y0 = to_double(batchnorm2d(Tensor<double>({1, 2, 3, 3}, 0.0), bn));
  const auto yab = to_double(batchnorm2d(add(a, b), bn));
  for (std::size_t i = 0; i < yab.size(); ++i) EXPECT_NEAR(yab[i], ya[i] + yb[i] - y0[i], 1e-12);
  EXPECT_EQ(to_double(bn.running_mean), rm);
}

TEST(BatchNorm, DegenerateTrainBatchIsDataError) {
  BatchNorm2dState<float> bn(2);
  EXPECT_THROW(batchnorm2d(Tensor<float>({1, 2, 1, 1}), bn), DataError);
  EXPECT_THROW(batchnorm2d(Tensor<float>({2, 3, 2, 2}), bn), ShapeError);
  bn.mode = Mode::eval;
  EXPECT_NO_THROW(batchnorm2d(Tensor<float>({1, 2, 1, 1}), bn));
}

TEST(ConvBlock, DilatedDepthwisePreservesSize) {
  Rng rng(5);
  for (std::size_t r : kDmscDilations) {
    DWConvBlock<float> blk(3, r, rng);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{7, 5}, {16, 16}, {9, 12}}) {
      EXPECT_EQ(blk.forward(random_tensor<float>({2, 3, h, w}, rng)).shape(), (Shape{2, 3, h, w}));
    }
    EXPECT_EQ(blk.conv_options().groups, 3u);
    EXPECT_EQ(blk.conv_options().padding, r);
  }
}

TEST(ConvBlock, IdentityPointwiseIsRelu) {
  Rng rng(6);
  ConvBlock<double> blk(3, 3, ConvBlockOptions{1, 1, 1, 1, true}, rng);
  for (double& v : blk.weight.mutable_data()) v = 0.0;
  for (std::size_t c = 0; c < 3; ++c) blk.weight.mutable_data()[c * 4] = 1.0;
  blk.set_mode(Mode::eval);
  blk.bn.epsilon = 0.0;
  auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  EXPECT_EQ(to_double(blk.forward(x)), relu_v(to_double(x)));
}

TEST(ConvBlock, MatchesCompositionOracle) {
  Rng rng(7);
  for (const ConvBlockOptions& o : {ConvBlockOptions{3, 1, 1, 1, true}, ConvBlockOptions{3, 2, 1, 1, true},
                                    ConvBlockOptions{1, 1, 1, 1, false}, ConvBlockOptions{3, 1, 3, 2, true}}) {
    ConvBlock<double> blk(4, 6, o, rng);
    randomize_bn(blk.bn, rng);
    blk.set_mode(Mode::eval);
    auto x = random_tensor<double>({2, 4, 9, 8}, rng);
    EXPECT_LT(max_abs_diff(to_double(blk.forward(x)), conv_block_oracle(to_double(x), blk, 2, 9, 8)), 1e-12);
  }
  EXPECT_THROW(ConvBlock<float>(4, 6, ConvBlockOptions{2, 1, 1, 1, true}, rng), ConfigError);
  EXPECT_THROW(ConvBlock<float>(4, 6, ConvBlockOptions{3, 1, 1, 4, true}, rng), ConfigError);
}

TEST(ConvBlock, ShapeIsAPureFunctionOfInputShape) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.below(3), h = 3 + rng.below(10), w = 3 + rng.below(10);
    const std::size_t stride = 1 + rng.below(2);
    ConvBlock<float> blk(2, 5, ConvBlockOptions{3, stride, 1, 1, true}, rng);
    auto y = blk.forward(random_tensor<float>({b, 2, h, w}, rng));
    EXPECT_EQ(y.shape(), (Shape{b, 5, (h - 1) / stride + 1, (w - 1) / stride + 1}));
  }
}

TEST(InvertedResidual, ZeroWeightsWithSkipIsIdentity) {
  Rng rng(9);
  InvertedResidual<double> ir(4, 4, rng);
  ASSERT_TRUE(ir.has_skip());
  for (auto* blk : {&ir.expand, &ir.depthwise, &ir.project})
    for (double& v : blk->weight.mutable_data()) v = 0.0;
  ir.set_mode(Mode::eval);
  auto x = random_tensor<double>({2, 4, 5, 5}, rng);
  EXPECT_EQ(to_double(ir.forward(x)), to_double(x));
}

TEST(InvertedResidual, NoSkipWhenWidthChanges) {
  Rng rng(10);
  InvertedResidual<float> ir(4, 6, rng);
  EXPECT_FALSE(ir.has_skip());
  EXPECT_EQ(ir.forward(random_tensor<float>({2, 4, 5, 7}, rng)).shape(), (Shape{2, 6, 5, 7}));
}

TEST(InvertedResidual, MatchesLayerByLayerOracle) {
  Rng rng(11);
  for (std::size_t cout : {5u, 8u}) {
    InvertedResidual<double> ir(5, cout, rng);
    ParamStore<double> store;
    ir.collect(store, "ir");
    randomize_bn(store, rng);
    ir.set_mode(Mode::eval);
    auto x = random_tensor<double>({2, 5, 6, 6}, rng);
    auto ref = conv_block_oracle(to_double(x), ir.expand, 2, 6, 6);
    ref = conv_block_oracle(ref, ir.depthwise, 2, 6, 6);
    ref = conv_block_oracle(ref, ir.project, 2, 6, 6);
    if (ir.has_skip()) ref = add_v(ref, to_double(x));
    EXPECT_LT(max_abs_diff(to_double(ir.forward(x)), ref), 1e-6);
  }
}

TEST(ParamStore, SingleConvWithBiasCounts76) {
  ParamStore<float> store;
  store.add_parameter("conv.weight", Tensor<float>({4, 2, 3, 3}));
  store.add_parameter("conv.bias", Tensor<float>({4}));
  store.add_buffer("bn.running_mean", Tensor<float>({4}));
  EXPECT_EQ(store.parameter_count(), 76u);
  EXPECT_THROW(store.add_parameter("conv.bias", Tensor<float>({4})), ContractError);
  EXPECT_TRUE(store.find("bn.running_mean").has_value());
  EXPECT_FALSE(store.find("missing").has_value());
}

TEST(Init, HeNormalStatistics) {
  Rng rng(12);
  auto w = he_normal<double>({64, 32, 3, 3}, 288, rng);
  double m = 0, sq = 0;
  for (double v : w.data()) m += v;
  m /= static_cast<double>(w.numel());
  for (double v : w.data()) sq += (v - m) * (v - m);
  const double sd = std::sqrt(sq / static_cast<double>(w.numel()));
  EXPECT_NEAR(m, 0.0, 0.01);
  EXPECT_NEAR(sd, std::sqrt(2.0 / 288.0), 0.03 * std::sqrt(2.0 / 288.0));
}

TEST(Blocks, GradcheckEndToEnd) {
  Rng rng(13);
  GradcheckOptions opts;
  {
    ConvBlock<double> blk(3, 4, ConvBlockOptions{3, 2, 1, 1, true}, rng);
    auto x = random_tensor<double>({2, 3, 6, 6}, rng);
    const auto r = check_gradients("conv_block", GradcheckLevel::block, 1e-4,
                                   {{"x", x}, {"w", blk.weight}, {"gamma", blk.bn.gamma}, {"beta", blk.bn.beta}},
                                   [&] { return blk.forward(x); }, opts);
    EXPECT_TRUE(r.passed()) << r.max_rel_error << " at " << r.worst;
  }
  {
    InvertedResidual<double> ir(3, 3, rng);
    auto x = random_tensor<double>({2, 3, 5, 5}, rng);
    const auto r = check_gradients("inverted_residual", GradcheckLevel::block, 1e-4,
                                   {{"x", x}, {"w1", ir.expand.weight}, {"w2", ir.depthwise.weight},
                                    {"w3", ir.project.weight}, {"gamma3", ir.project.bn.gamma}},
                                   [&] { return ir.forward(x); }, opts);
    EXPECT_TRUE(r.passed()) << r.max_rel_error << " at " << r.worst;
  }
}

// ---- DMSC ----

TEST(Dmsc, ShapePreservedAndChannelMismatchRejected) {
  Rng rng(20);
  DmscBlock<float> blk(8, rng);
  EXPECT_EQ(blk.gate_hidden(), 4u);
  EXPECT_EQ(DmscBlock<float>(32, rng).gate_hidden(), 8u);
  for (auto [b, h, w] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 8, 8}, {2, 16, 16}, {3, 5, 9}}) {
    EXPECT_EQ(blk.forward(random_tensor<float>({b, 8, h, w}, rng)).shape(), (Shape{b, 8, h, w}));
  }
  EXPECT_THROW(blk.forward(random_tensor<float>({2, 4, 8, 8}, rng)), ShapeError);
}

TEST(Dmsc, GateRowsAreADistribution) {
  Rng rng(21);
  DmscBlock<double> blk(8, rng);
  auto x = random_tensor<double>({5, 8, 7, 7}, rng, -2, 2);
  auto w = blk.branch_weights(x);
  ASSERT_EQ(w.shape(), (Shape{5, 4}));
  for (std::size_t b = 0; b < 5; ++b) {
    double s = 0;
    for (std::size_t r = 0; r < 4; ++r) {
      const double v = w.data()[b * 4 + r];
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Dmsc, BranchWeightsMatchForwardAndDuplicatesAgree) {
  Rng rng(22);
  DmscBlock<double> blk(8, rng);
  blk.set_mode(Mode::eval);
  auto one = random_tensor<double>({1, 8, 6, 6}, rng);
  auto two = concat_channels(reshape(one, {1, 1, 8 * 6 * 6}), reshape(one, {1, 1, 8 * 6 * 6}));
  auto x = reshape(two, {2, 8, 6, 6});
  const auto trace = blk.forward_traced(x);
  EXPECT_EQ(to_double(blk.branch_weights(x)), to_double(trace.weights));
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(trace.weights.data()[r], trace.weights.data()[4 + r]);
}

TEST(Dmsc, ZeroGateAveragesBranches) {
  Rng rng(23);
  DmscBlock<double> blk(8, rng);
  for (auto* l : {&blk.gate_hidden_layer, &blk.gate_logits_layer}) {
    for (double& v : l->weight.mutable_data()) v = 0.0;
    for (double& v : l->bias.mutable_data()) v = 0.0;
  }
  const auto t = blk.forward_traced(random_tensor<double>({2, 8, 6, 6}, rng));
  for (double v : t.weights.data()) EXPECT_EQ(v, 0.25);
  for (std::size_t i = 0; i < t.aggregated.numel(); ++i) {
    double avg = 0;
    for (const auto& br : t.branches) avg += br.data()[i];
    EXPECT_NEAR(t.aggregated.data()[i], avg / 4, 1e-12);
  }
}

TEST(Dmsc, DominantLogitSelectsItsBranch) {
  Rng rng(24);
  for (std::size_t pick = 0; pick < 4; ++pick) {
    DmscBlock<double> blk(8, rng);
    for (double& v : blk.gate_logits_layer.weight.mutable_data()) v = 0.0;
    for (std::size_t r = 0; r < 4; ++r) blk.gate_logits_layer.bias.mutable_data()[r] = r == pick ? 20.0 : 0.0;
    const auto t = blk.forward_traced(random_tensor<double>({2, 8, 6, 6}, rng));
    EXPECT_LT(max_abs_diff(to_double(t.aggregated), to_double(t.branches[pick])), 1e-4);
  }
}

TEST(Dmsc, AggregateStaysInsideBranchHull) {
  Rng rng(25);
  DmscBlock<double> blk(8, rng);
  for (int trial = 0; trial < 3; ++trial) {
    const auto t = blk.forward_traced(random_tensor<double>({3, 8, 9, 9}, rng, -3, 3));
    for (std::size_t i = 0; i < t.aggregated.numel(); ++i) {
      double lo = 1e300, hi = -1e300;
      for (const auto& br : t.branches) {
        lo = std::min(lo, br.data()[i]);
        hi = std::max(hi, br.data()[i]);
      }
      EXPECT_GE(t.aggregated.data()[i], lo - 1e-12);
      EXPECT_LE(t.aggregated.data()[i], hi + 1e-12);
    }
  }
}

TEST(Dmsc, PermutingBranchesWithLogitsLeavesAggregateUnchanged) {
  Rng rng(26);
  DmscBlock<double> blk(8, rng);
  const auto t = blk.forward_traced(random_tensor<double>({2, 8, 6, 6}, rng));
  const std::array<std::size_t, 4> perm = {2, 0, 3, 1};
  std::vector<Tensor<double>> permuted;
  Tensor<double> logits({2, 4});
  for (std::size_t r = 0; r < 4; ++r) {
    permuted.push_back(t.branches[perm[r]]);
    for (std::size_t b = 0; b < 2; ++b) logits.mutable_data()[b * 4 + r] = t.logits.data()[b * 4 + perm[r]];
  }
  auto agg = gated_sum<double>(permuted, softmax(logits));
  EXPECT_LT(max_abs_diff(to_double(agg), to_double(t.aggregated)), 1e-6);
}

TEST(Dmsc, MatchesStepByStepOracle) {
  Rng rng(27);
  for (bool skip_fuse : {false, true}) {
    DmscBlock<double> blk(8, rng, skip_fuse);
    ParamStore<double> store;
    blk.collect(store, "dmsc");
    randomize_bn(store, rng);
    for (auto* l : {&blk.gate_hidden_layer, &blk.gate_logits_layer})
      for (double& v : l->bias.mutable_data()) v = rng.uniform(-0.5, 0.5);
    blk.set_mode(Mode::eval);
    const std::size_t B = 2, C = 8, H = 16, W = 16, HW = H * W;
    auto x = random_tensor<double>({B, C, H, W}, rng);
    const auto xin = to_double(x);

    const auto mapped = conv_block_oracle(xin, blk.entry, B, H, W);
    const auto pooled = pool_v(mapped, B * C, HW);
    const auto hidden = relu_v(oracle::linear(pooled, to_double(blk.gate_hidden_layer.weight),
                                              to_double(blk.gate_hidden_layer.bias), B, C, blk.gate_hidden()));
    const auto logits = oracle::linear(hidden, to_double(blk.gate_logits_layer.weight),
                                       to_double(blk.gate_logits_layer.bias), B, blk.gate_hidden(), 4);
    const auto weights = oracle::softmax(logits, B, 4);
    std::vector<double> agg(B * C * HW, 0.0);
    for (std::size_t r = 0; r < 4; ++r) {
      const auto br = conv_block_oracle(mapped, *blk.branches[r], B, H, W);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < C * HW; ++k) agg[b * C * HW + k] += weights[b * 4 + r] * br[b * C * HW + k];
    }
    const auto fused = skip_fuse ? agg : conv_block_oracle(agg, blk.fuse, B, H, W);
    const auto ref = relu_v(add_v(conv_block_oracle(fused, blk.exit, B, H, W), xin));

    EXPECT_LT(max_abs_diff(to_double(blk.forward(x)), ref), 1e-6) << "skip_fuse=" << skip_fuse;
  }
}

TEST(Dmsc, GradcheckReachesGateLayers) {
  Rng rng(28);
  DmscBlock<double> blk(4, rng);
  // Keeps every gate hidden unit active so the gate path carries gradient.
  for (double& v : blk.gate_hidden_layer.bias.mutable_data()) v = 1.0;
  auto x = random_tensor<double>({2, 4, 6, 6}, rng);
  const auto r = check_gradients("dmsc", GradcheckLevel::block, 1e-4,
                                 {{"x", x},
                                  {"gate.fc1.weight", blk.gate_hidden_layer.weight},
                                  {"gate.fc2.weight", blk.gate_logits_layer.weight},
                                  {"gate.fc2.bias", blk.gate_logits_layer.bias},
                                  {"branch_d3.weight", blk.branches[2]->weight},
                                  {"fuse.weight", blk.fuse.weight}},
                                 [&] { return blk.forward(x); });
  EXPECT_TRUE(r.passed()) << r.max_rel_error << " at " << r.worst;
  // The gate gradient must be non-trivial, not just consistent.
  double g = 0;
  for (double v : blk.gate_logits_layer.weight.grad()) g += std::abs(v);
  EXPECT_GT(g, 0.0);
}

// ---- DWBG ----

TEST(Dwbg, GeneratedShapesAndHeadShape) {
  Rng rng(30);
  DwbgHead<float> head(8, rng);
  EXPECT_EQ(head.generator.hidden(), 8u);
  EXPECT_EQ(DwbgGenerator<float>(16, rng).hidden(), 16u);
  auto enc = random_tensor<float>({2, 8, 64, 64}, rng), dec = random_tensor<float>({2, 8, 64, 64}, rng);
  const auto k = head.generator.generate(enc, dec);
  EXPECT_EQ(k.weights.shape(), (Shape{2, 1, 8, 3, 3}));
  EXPECT_EQ(k.bias.shape(), (Shape{2, 1}));
  EXPECT_EQ(head.forward(enc, dec).shape(), (Shape{2, 1, 64, 64}));
  EXPECT_THROW(head.forward(random_tensor<float>({2, 4, 8, 8}, rng), dec), ShapeError);
  EXPECT_THROW(head.forward(random_tensor<float>({3, 8, 8, 8}, rng), dec), ShapeError);
}

TEST(Dwbg, ZeroSecondLayerGivesZeroLogits) {
  Rng rng(31);
  DwbgHead<float> head(4, rng);
  for (float& v : head.generator.output_layer.weight.mutable_data()) v = 0.0f;
  auto enc = random_tensor<float>({2, 4, 8, 8}, rng), dec = random_tensor<float>({2, 4, 8, 8}, rng);
  const auto k = head.generator.generate(enc, dec);
  for (float v : k.weights.data()) EXPECT_EQ(v, 0.0f);
  for (float v : k.bias.data()) EXPECT_EQ(v, 0.0f);
  const auto probs = sigmoid(head.forward(enc, dec));
  for (float v : probs.data()) EXPECT_EQ(v, 0.5f);
}

TEST(Dwbg, GeneratorMatchesCompositionOracle) {
  Rng rng(32);
  DwbgGenerator<double> gen(6, rng);
  for (double& v : gen.hidden_layer.bias.mutable_data()) v = rng.uniform(-0.2, 0.2);
  for (double& v : gen.output_layer.bias.mutable_data()) v = rng.uniform(-0.2, 0.2);
  auto enc = random_tensor<double>({3, 6, 8, 8}, rng), dec = random_tensor<double>({3, 6, 4, 4}, rng);
  const auto k = gen.generate(enc, dec);
  const auto pe = pool_v(to_double(enc), 18, 64), pd = pool_v(to_double(dec), 18, 16);
  std::vector<double> code;
  for (std::size_t b = 0; b < 3; ++b) {
    code.insert(code.end(), pe.begin() + b * 6, pe.begin() + (b + 1) * 6);
    code.insert(code.end(), pd.begin() + b * 6, pd.begin() + (b + 1) * 6);
  }
  const auto hid = relu_v(oracle::linear(code, to_double(gen.hidden_layer.weight), to_double(gen.hidden_layer.bias), 3,
                                         12, gen.hidden()));
  const std::size_t n_out = 6 * 9 + 1;
  const auto raw = oracle::linear(hid, to_double(gen.output_layer.weight), to_double(gen.output_layer.bias), 3,
                                  gen.hidden(), n_out);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 54; ++i) EXPECT_NEAR(k.weights.data()[b * 54 + i], raw[b * n_out + i], 1e-6);
    EXPECT_NEAR(k.bias.data()[b], raw[b * n_out + 54], 1e-6);
  }
}

TEST(Dwbg, DuplicateSamplesGenerateIdenticalKernels) {
  Rng rng(33);
  DwbgGenerator<float> gen(4, rng);
  auto e1 = random_tensor<float>({1, 4, 6, 6}, rng), d1 = random_tensor<float>({1, 4, 6, 6}, rng);
  auto dup = [](const Tensor<float>& t) {
    return reshape(concat_channels(reshape(t, {1, 1, t.numel()}), reshape(t, {1, 1, t.numel()})), {2, 4, 6, 6});
  };
  const auto k = gen.generate(dup(e1), dup(d1));
  for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(k.weights.data()[i], k.weights.data()[36 + i]);
  EXPECT_EQ(k.bias.data()[0], k.bias.data()[1]);
  const auto again = gen.generate(dup(e1), dup(d1));
  EXPECT_EQ(to_double(again.weights), to_double(k.weights));
}

TEST(Dwbg, PerSampleIndependenceIsBitExact) {
  Rng rng(34);
  DwbgHead<float> head(4, rng);
  auto enc = random_tensor<float>({3, 4, 8, 8}, rng), dec = random_tensor<float>({3, 4, 8, 8}, rng);
  const auto before = head.forward(enc, dec);
  for (std::size_t i = 256; i < 512; ++i) {
    enc.mutable_data()[i] += 1.0f;
    dec.mutable_data()[i] *= -2.0f;
  }
  const auto after = head.forward(enc, dec);
  for (std::size_t b : {0u, 2u})
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(before.data()[b * 64 + i], after.data()[b * 64 + i]);
  double changed = 0;
  for (std::size_t i = 64; i < 128; ++i) changed += std::abs(before.data()[i] - after.data()[i]);
  EXPECT_GT(changed, 0.0);
}

TEST(DynamicConv, ZeroWeightsGiveConstantBias) {
  Rng rng(35);
  auto x = random_tensor<float>({2, 3, 5, 5}, rng);
  Tensor<float> w({2, 1, 3, 3, 3}, 0.0f), b({2, 1}, std::vector<float>{0.25f, -1.5f});
  const auto y = dynamic_conv(x, w, b);
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(y.data()[i], 0.25f);
    EXPECT_EQ(y.data()[25 + i], -1.5f);
  }
}

TEST(DynamicConv, SingleSampleEqualsConv2d) {
  Rng rng(36);
  auto x = random_tensor<float>({1, 5, 9, 7}, rng);
  auto w = random_tensor<float>({1, 2, 5, 3, 3}, rng);
  auto b = random_tensor<float>({1, 2}, rng);
  const auto y = dynamic_conv(x, w, b);
  const auto ref = conv2d(x, reshape(w, {2, 5, 3, 3}), reshape(b, {2}), {1, 1, 1, 1});
  EXPECT_LE(max_abs_diff(to_double(y), to_double(ref)), 1e-7);
}

TEST(DynamicConv, BatchEqualsPerSampleOracle) {
  Rng rng(37);
  auto x = random_tensor<double>({3, 4, 6, 6}, rng);
  auto w = random_tensor<double>({3, 1, 4, 3, 3}, rng);
  auto b = random_tensor<double>({3, 1}, rng);
  const auto y = to_double(dynamic_conv(x, w, b));
  const auto xs = to_double(x), ws = to_double(w);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::vector<double> xi(xs.begin() + s * 144, xs.begin() + (s + 1) * 144);
    const std::vector<double> wi(ws.begin() + s * 36, ws.begin() + (s + 1) * 36);
    const auto ref = oracle::conv2d(xi, wi, {b.data()[s]}, {1, 4, 6, 6, 1, 3, 3, 1, 1, 1, 1});
    for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(y[s * 36 + i], ref[i], 1e-6);
  }
  EXPECT_THROW(dynamic_conv(x, random_tensor<double>({2, 1, 4, 3, 3}, rng), b), ShapeError);
  EXPECT_THROW(dynamic_conv(x, random_tensor<double>({3, 1, 5, 3, 3}, rng), b), ShapeError);
}

TEST(Dwbg, JointGradcheckThroughGeneratorAndConv) {
  Rng rng(38);
  DwbgHead<double> head(4, rng);
  auto enc = random_tensor<double>({2, 4, 6, 6}, rng), dec = random_tensor<double>({2, 4, 6, 6}, rng);
  const auto r = check_gradients("dwbg_head", GradcheckLevel::block, 1e-4,
                                 {{"enc", enc},
                                  {"dec", dec},
                                  {"fc1.weight", head.generator.hidden_layer.weight},
                                  {"fc2.weight", head.generator.output_layer.weight},
                                  {"fc2.bias", head.generator.output_layer.bias}},
                                 [&] { return head.forward(enc, dec); });
  EXPECT_TRUE(r.passed()) << r.max_rel_error << " at " << r.worst;
}
