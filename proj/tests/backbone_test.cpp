#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "psp/backbone.hpp"
#include "psp/gradcheck.hpp"

using psp::Tensor;
using Td = Tensor<double>;
using Tf = Tensor<float>;
using psp::testing::random_tensor;

TEST(Backbone, ToyPresetShapes) {
  psp::Rng rng(0);
  psp::Backbone<float> net(psp::BackboneConfig::toy(), rng);
  std::mt19937_64 drng(1);
  auto x = random_tensor<float>({1, 3, 64, 64}, drng);
  auto out = net(x, psp::Ctx::infer());
  EXPECT_EQ(out.final.shape(), (psp::Shape{1, 128, 8, 8}));
  EXPECT_EQ(out.tap.shape(), (psp::Shape{1, 64, 8, 8}));
}

TEST(Backbone, OutputStrideEightOverRandomSizes) {
  std::mt19937_64 drng(2);
  for (auto cfg : {psp::BackboneConfig::toy(), psp::BackboneConfig::resnet50()}) {
    if (cfg.stem == psp::StemKind::ResNet) {
      // shrink the layout so the test stays fast; strides and dilations are what matter
      cfg.stage_blocks = {1, 1, 1, 1};
      cfg.base_channels = 4;
      cfg.out_multiplier = 1;
    }
    psp::Rng rng(3);
    psp::Backbone<float> net(cfg, rng);
    for (int trial = 0; trial < 6; ++trial) {
      std::int64_t h = 8 * (1 + std::int64_t(drng() % 6)), w = 8 * (1 + std::int64_t(drng() % 6));
      auto out = net(random_tensor<float>({2, 3, h, w}, drng), psp::Ctx::infer());
      EXPECT_EQ(out.final.dim(2), h / 8);
      EXPECT_EQ(out.final.dim(3), w / 8);
      EXPECT_EQ(out.tap.dim(2), out.final.dim(2));
      EXPECT_EQ(out.tap.dim(3), out.final.dim(3));
    }
  }
}

TEST(Backbone, PresetLayouts) {
  auto r50 = psp::BackboneConfig::resnet50();
  EXPECT_EQ(r50.final_channels(), 2048);
  EXPECT_EQ(r50.tap_channels(), 1024);
  EXPECT_EQ(r50.output_stride(), 8);
  EXPECT_EQ(psp::BackboneConfig::resnet101().stage_blocks, (std::array<int, 4>{3, 4, 23, 3}));
  EXPECT_EQ(psp::BackboneConfig::toy().output_stride(), 8);
}

TEST(Backbone, RejectsIndivisibleInput) {
  psp::Rng rng(0);
  psp::Backbone<float> net(psp::BackboneConfig::toy(), rng);
  EXPECT_THROW(net(Tf::zeros({1, 3, 20, 24}), psp::Ctx::infer()), psp::ShapeError);
  EXPECT_THROW(net(Tf::zeros({1, 1, 16, 16}), psp::Ctx::infer()), psp::ShapeError);
}

TEST(Backbone, RejectsWrongOutputStride) {
  auto cfg = psp::BackboneConfig::toy();
  cfg.strides = {2, 2, 2, 1};
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
}

TEST(Bottleneck, ZeroGammaResidualIsIdentity) {
  psp::Rng rng(4);
  psp::Bottleneck<float> block(8, 2, 8, 1, 2, true, rng);
  std::mt19937_64 drng(5);
  // block inputs follow a ReLU in the network, so they are non-negative
  auto x = random_tensor<float>({2, 8, 6, 6}, drng, false, 0.0, 1.0);
  auto y = block(x, psp::Ctx::train());
  EXPECT_EQ(y.to_vector(), x.to_vector());
}

TEST(ReceptiveField, SingleConvFootprint) {
  std::mt19937_64 drng(6);
  auto w = random_tensor<double>({1, 1, 3, 3}, drng, false, 0.1, 1.0);
  auto net = [&](const Td& x) { return psp::conv2d(x, w, {1, 1, 1}); };
  EXPECT_EQ(psp::impulse_footprint(net, 1, 15), 3);
}

TEST(ReceptiveField, StackedConvFootprint) {
  std::mt19937_64 drng(7);
  auto w1 = random_tensor<double>({1, 1, 3, 3}, drng, false, 0.1, 1.0);
  auto w2 = random_tensor<double>({1, 1, 3, 3}, drng, false, 0.1, 1.0);
  auto net = [&](const Td& x) { return psp::conv2d(psp::conv2d(x, w1, {1, 1, 1}), w2, {1, 1, 1}); };
  EXPECT_EQ(psp::impulse_footprint(net, 1, 15), 5);
}

TEST(ReceptiveField, DilationPlanEnlargesFootprint) {
  auto dilated = psp::BackboneConfig::toy();
  auto plain = dilated;
  plain.dilations = {1, 1, 1, 1};
  auto fd = psp::receptive_field_probe(dilated, 512);
  auto fp = psp::receptive_field_probe(plain, 512);
  EXPECT_GT(fd, fp);
  EXPECT_LT(fd, 512);  // not clipped by the canvas
}

TEST(Backbone, ToyGradientCheck) {
  psp::Rng rng(8);
  psp::Backbone<double> net(psp::BackboneConfig::toy(), rng);
  std::mt19937_64 drng(9);
  auto x = random_tensor<double>({1, 3, 16, 16}, drng, true);
  auto proj_f = random_tensor<double>({1, 128, 2, 2}, drng);
  auto proj_t = random_tensor<double>({1, 64, 2, 2}, drng);
  psp::NamedTensors<double> named;
  net.collect("b", named);
  std::vector<Td> inputs{x};
  for (auto& e : named) {
    if (e.kind == psp::EntryKind::Parameter) inputs.push_back(e.tensor);
  }
  auto f = [&] {
    auto out = net(x, psp::Ctx::train());
    return psp::add(psp::sum(psp::mul(out.final, proj_f)), psp::sum(psp::mul(out.tap, proj_t)));
  };
  auto r = psp::finite_diff_check<double>(f, inputs, {psp::kStepLadder, 4, 10});
  EXPECT_LT(r.max_rel_error, 1e-4) << "tensor " << r.worst_tensor << " index " << r.worst_index << " analytic "
                                   << r.worst_analytic << " numeric " << r.worst_numeric;
}
