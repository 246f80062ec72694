#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "psp/gradcheck.hpp"
#include "psp/model.hpp"

using psp::Tensor;
using Td = Tensor<double>;
using Tf = Tensor<float>;
using psp::testing::random_tensor;

namespace {

psp::ModelConfig micro_config(int classes) {
  psp::ModelConfig c = psp::ModelConfig::toy(classes);
  c.backbone.stage_blocks = {1, 1, 1, 1};
  c.backbone.base_channels = 8;
  c.pyramid = psp::PyramidConfig{{1, 2}, psp::PoolMode::Average, true};
  c.head_channels = 8;
  return c;
}

psp::LabelMap random_labels(std::int64_t n, std::int64_t h, std::int64_t w, int k, std::mt19937_64& rng) {
  psp::LabelMap m(n, h, w);
  for (auto& v : m.data) v = static_cast<std::int32_t>(rng() % k);
  return m;
}

}  // namespace

TEST(ModelConfig, ToyCensusWithinBudget) {
  auto cfg = psp::ModelConfig::toy(4);
  auto n = psp::count_parameters(cfg);
  EXPECT_LE(n, 200000);
  auto no_aux = cfg;
  no_aux.aux_enabled = false;
  EXPECT_LT(psp::count_parameters(no_aux), n);
}

TEST(ModelConfig, CensusMatchesTensorTotal) {
  psp::PSPNet<float> net(psp::ModelConfig::toy(4), 0);
  std::int64_t total = 0;
  for (const auto& p : net.parameters()) total += static_cast<std::int64_t>(p.tensor.numel());
  EXPECT_EQ(total, net.num_parameters());
}

TEST(ModelConfig, SingleConvCensus) {
  psp::Rng rng(0);
  psp::Conv2d<float> conv({3, 4, 1, {1, 0, 1}, true}, rng);
  EXPECT_EQ(conv.num_parameters(), 16);
}

TEST(ModelConfig, ValidationErrors) {
  auto cfg = psp::ModelConfig::toy(4);
  cfg.aux_weight = 1.5;
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
  cfg = psp::ModelConfig::toy(0);
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
}

TEST(ModelConfig, ArchitectureIgnoresAuxSettings) {
  auto a = psp::ModelConfig::toy(4);
  auto b = a;
  b.aux_enabled = false;
  b.aux_weight = 0.9;
  EXPECT_EQ(a.architecture(), b.architecture());
  b.pyramid.reset();
  EXPECT_NE(a.architecture(), b.architecture());
}

TEST(PSPNet, NamedTensorsSortedAndAuxScoped) {
  psp::PSPNet<float> net(psp::ModelConfig::toy(4), 0);
  auto named = net.named_tensors();
  for (std::size_t i = 1; i < named.size(); ++i) EXPECT_LT(named[i - 1].name, named[i].name);
  auto cfg = psp::ModelConfig::toy(4);
  cfg.aux_enabled = false;
  psp::PSPNet<float> pruned(cfg, 0);
  for (const auto& e : pruned.named_tensors()) EXPECT_FALSE(e.name.starts_with("aux/")) << e.name;
}

TEST(PSPNet, TotalLossIsLinearInAuxWeight) {
  std::mt19937_64 drng(1);
  auto x = random_tensor<float>({2, 3, 48, 48}, drng);
  auto y = random_labels(2, 48, 48, 4, drng);
  float main0 = 0, aux0 = 0;
  for (double alpha : {0.0, 0.4, 1.0}) {
    auto cfg = psp::ModelConfig::toy(4);
    cfg.aux_weight = alpha;
    psp::PSPNet<float> net(cfg, 7);
    auto l = net.forward_train(x, y);
    if (alpha == 0.0) {
      EXPECT_EQ(l.total.item(), l.main.item());
      main0 = l.main.item();
      aux0 = l.aux.item();
    }
    EXPECT_EQ(l.main.item(), main0);
    EXPECT_EQ(l.aux.item(), aux0);
    EXPECT_FLOAT_EQ(l.total.item(), main0 + static_cast<float>(alpha) * aux0);
  }
}

TEST(PSPNet, WeightedSumArithmetic) {
  auto total = psp::add(Tf::scalar(1.0f), psp::scale(Tf::scalar(0.5f), 0.4f));
  EXPECT_FLOAT_EQ(total.item(), 1.2f);
}

TEST(PSPNet, AuxDisabledTotalEqualsMain) {
  auto cfg = psp::ModelConfig::toy(4);
  cfg.aux_enabled = false;
  psp::PSPNet<float> net(cfg, 3);
  std::mt19937_64 drng(2);
  auto l = net.forward_train(random_tensor<float>({2, 3, 48, 48}, drng), random_labels(2, 48, 48, 4, drng));
  EXPECT_EQ(l.total.item(), l.main.item());
  EXPECT_EQ(l.aux.item(), 0.0f);
}

TEST(PSPNet, SharedGradientIsMainPlusWeightedAux) {
  auto cfg = micro_config(3);
  psp::PSPNet<double> net(cfg, 11);
  std::mt19937_64 drng(3);
  auto x = random_tensor<double>({2, 3, 16, 16}, drng);
  auto y = random_labels(2, 16, 16, 3, drng);
  auto stem = net.backbone().stem().conv().weight();

  auto grad_of = [&](auto pick) {
    net.zero_grad();
    pick(net.forward_train(x, y)).backward();
    return std::vector<double>(stem.grad().begin(), stem.grad().end());
  };
  auto gt = grad_of([](const psp::TrainLosses<double>& l) { return l.total; });
  auto gm = grad_of([](const psp::TrainLosses<double>& l) { return l.main; });
  auto ga = grad_of([](const psp::TrainLosses<double>& l) { return l.aux; });
  double max_abs = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    EXPECT_NEAR(gt[i], gm[i] + 0.4 * ga[i], 1e-12 * (1 + std::abs(gt[i])));
    max_abs = std::max(max_abs, std::abs(ga[i]));
  }
  EXPECT_GT(max_abs, 0.0);  // the auxiliary loss does reach the stem
}

TEST(PSPNet, InferenceIndependentOfAuxBranch) {
  auto with = psp::ModelConfig::toy(4);
  auto without = with;
  without.aux_enabled = false;
  psp::PSPNet<float> a(with, 5), b(without, 5);
  std::mt19937_64 drng(4);
  auto x = random_tensor<float>({1, 3, 64, 64}, drng);
  auto pa = a.forward_infer(x);
  auto pb = b.forward_infer(x);
  EXPECT_EQ(pa.logits.to_vector(), pb.logits.to_vector());
  EXPECT_EQ(pa.labels, pb.labels);
}

TEST(PSPNet, PredictionInvariants) {
  psp::PSPNet<float> net(psp::ModelConfig::toy(5), 6);
  std::mt19937_64 drng(5);
  auto p = net.forward_infer(random_tensor<float>({2, 3, 48, 64}, drng));
  ASSERT_EQ(p.logits.shape(), (psp::Shape{2, 5, 48, 64}));
  EXPECT_EQ(p.labels.batch, 2);
  EXPECT_EQ(p.labels.height, 48);
  EXPECT_EQ(p.labels.width, 64);
  auto lv = p.logits.to_vector();
  const std::int64_t hw = 48 * 64;
  for (std::int64_t n = 0; n < 2; ++n) {
    for (std::int64_t i = 0; i < hw; ++i) {
      double s = 0;
      int best = 0;
      for (int k = 0; k < 5; ++k) {
        s += p.probs[(n * 5 + k) * hw + i];
        if (lv[(n * 5 + k) * hw + i] > lv[(n * 5 + best) * hw + i]) best = k;
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
      EXPECT_EQ(p.labels.data[n * hw + i], best);
    }
  }
}

TEST(PSPNet, ConstantClassifierGivesConstantLogits) {
  psp::PSPNet<float> net(psp::ModelConfig::toy(3), 8);
  auto& cls = net.head().classifier();
  auto w = cls.weight().data();
  std::fill(w.begin(), w.end(), 0.0f);
  auto b = cls.bias().data();
  b[0] = 0.5f;
  b[1] = -1.0f;
  b[2] = 2.0f;
  std::mt19937_64 drng(6);
  auto p = net.forward_infer(random_tensor<float>({1, 3, 48, 48}, drng));
  auto lv = p.logits.to_vector();
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 48 * 48; ++i) EXPECT_EQ(lv[k * 48 * 48 + i], b[k]);
  }
}

TEST(PSPNet, BaselineWithoutPyramid) {
  auto cfg = psp::ModelConfig::toy(4);
  cfg.pyramid.reset();
  psp::PSPNet<float> net(cfg, 0);
  std::mt19937_64 drng(7);
  auto p = net.forward_infer(random_tensor<float>({1, 3, 32, 32}, drng));
  EXPECT_EQ(p.logits.shape(), (psp::Shape{1, 4, 32, 32}));
  for (const auto& e : net.named_tensors()) EXPECT_FALSE(e.name.starts_with("psp/"));
}

TEST(PSPNet, RejectsOutOfRangeLabels) {
  psp::PSPNet<float> net(psp::ModelConfig::toy(3), 0);
  psp::LabelMap y(1, 48, 48, 3);
  EXPECT_THROW(net.forward_train(Tf::zeros({1, 3, 48, 48}), y), std::invalid_argument);
}

class ModelGradCheck : public ::testing::TestWithParam<int> {};

TEST_P(ModelGradCheck, EndToEndMicro) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  psp::PSPNet<double> net(micro_config(3), seed);
  std::mt19937_64 drng(seed + 1000);
  // batch 4: with two images the global-bin BN sees two values per channel and
  // saturates, leaving gradients below what differencing can resolve
  auto x = random_tensor<double>({4, 3, 16, 16}, drng, true);
  auto y = random_labels(4, 16, 16, 3, drng);
  std::vector<Td> inputs{x};
  for (const auto& p : net.parameters()) inputs.push_back(p.tensor);
  auto f = [&] { return net.forward_train(x, y).total; };
  auto r = psp::finite_diff_check<double>(f, inputs, {psp::kStepLadder, 3, seed});
  EXPECT_LT(r.max_rel_error, 1e-4) << "tensor " << r.worst_tensor << " index " << r.worst_index << " analytic "
                                   << r.worst_analytic << " numeric " << r.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(Seeds, ModelGradCheck, ::testing::Range(0, 20));
