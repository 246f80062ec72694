#pragma once

// Residual feature extractor with output stride 8: the stem and the first two
// stages downsample, the last two keep resolution and dilate instead.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "psp/layers.hpp"

namespace psp {

enum class StemKind {
  Toy,     // one 3x3 stride-2 conv
  ResNet,  // 7x7 stride-2 conv + 3x3 stride-2 max pool
};

struct BackboneConfig {
  std::array<int, 4> stage_blocks{2, 2, 2, 2};
  int base_channels = 16;
  // Stage s (0-based) outputs base_channels * 2^s * out_multiplier channels;
  // its bottleneck width is that divided by bottleneck_ratio.
  int out_multiplier = 1;
  int bottleneck_ratio = 4;
  StemKind stem = StemKind::Toy;
  std::array<int, 4> strides{2, 2, 1, 1};
  std::array<int, 4> dilations{1, 1, 2, 4};
  // 1-based stage whose output feeds the auxiliary head.
  int tap_stage = 3;
  // Start every block's last BN at gamma = 0 so blocks begin as identities.
  bool zero_init_residual = false;

  static BackboneConfig toy() { return {}; }

  static BackboneConfig resnet50() {
    BackboneConfig c;
    c.stage_blocks = {3, 4, 6, 3};
    c.base_channels = 64;
    c.out_multiplier = 4;
    c.stem = StemKind::ResNet;
    c.strides = {1, 2, 1, 1};
    return c;
  }

  static BackboneConfig resnet101() {
    auto c = resnet50();
    c.stage_blocks = {3, 4, 23, 3};
    return c;
  }

  int stage_channels(int s) const { return base_channels * (1 << s) * out_multiplier; }
  int stage_width(int s) const { return std::max(1, stage_channels(s) / bottleneck_ratio); }
  int final_channels() const { return stage_channels(3); }
  int tap_channels() const { return stage_channels(tap_stage - 1); }

  int output_stride() const {
    int s = stem == StemKind::Toy ? 2 : 4;
    for (int st : strides) s *= st;
    return s;
  }

  void validate() const {
    if (base_channels < 1 || out_multiplier < 1 || bottleneck_ratio < 1) {
      throw ConfigError("backbone: channel settings must be positive");
    }
    for (int b : stage_blocks) {
      if (b < 1) throw ConfigError("backbone: every stage needs at least one block");
    }
    for (int d : dilations) {
      if (d < 1) throw ConfigError("backbone: dilation must be >= 1");
    }
    if (tap_stage < 1 || tap_stage > 4) throw ConfigError("backbone: tap_stage must be in 1..4");
    if (output_stride() != 8) {
      throw ConfigError("backbone: stem and stage strides must give output stride 8, got " +
                        std::to_string(output_stride()));
    }
  }
};

/// 1x1 reduce -> 3x3 (strided/dilated) -> 1x1 expand, plus identity or
/// projection shortcut.
template <typename T>
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(int in, int width, int out, int stride, int dilation, bool zero_last, Rng& rng)
      : reduce_({in, width, 1, {1, 0, 1}}, rng),
        spatial_({width, width, 3, {stride, dilation, dilation}}, rng),
        expand_({width, out, 1, {1, 0, 1}}, rng, false) {
    if (in != out || stride != 1) {
      shortcut_ = ConvBn<T>({in, out, 1, {stride, 0, 1}}, rng, false);
      projection_ = true;
    }
    if (zero_last) std::fill(expand_.bn().gamma().data().begin(), expand_.bn().gamma().data().end(), T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x, const Ctx& ctx) const {
    auto y = expand_(spatial_(reduce_(x, ctx), ctx), ctx);
    return relu(add(y, projection_ ? shortcut_(x, ctx) : x));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    reduce_.collect(prefix + "/conv1", out);
    spatial_.collect(prefix + "/conv2", out);
    expand_.collect(prefix + "/conv3", out);
    if (projection_) shortcut_.collect(prefix + "/shortcut", out);
  }

  std::int64_t num_parameters() const {
    return reduce_.num_parameters() + spatial_.num_parameters() + expand_.num_parameters() +
           (projection_ ? shortcut_.num_parameters() : 0);
  }

  ConvBn<T>& expand() { return expand_; }

 private:
  ConvBn<T> reduce_, spatial_, expand_, shortcut_;
  bool projection_ = false;
};

template <typename T>
struct BackboneOutput {
  Tensor<T> final;
  Tensor<T> tap;
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    if (cfg.stem == StemKind::Toy) {
      stem_ = ConvBn<T>({3, cfg.base_channels, 3, {2, 1, 1}}, rng);
    } else {
      stem_ = ConvBn<T>({3, cfg.base_channels, 7, {2, 3, 1}}, rng);
    }
    int in = cfg.base_channels;
    for (int s = 0; s < 4; ++s) {
      std::vector<Bottleneck<T>> blocks;
      for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
        int stride = b == 0 ? cfg.strides[s] : 1;
        blocks.emplace_back(in, cfg.stage_width(s), cfg.stage_channels(s), stride, cfg.dilations[s],
                            cfg.zero_init_residual, rng);
        in = cfg.stage_channels(s);
      }
      stages_[s] = std::move(blocks);
    }
  }

  BackboneOutput<T> operator()(const Tensor<T>& x, const Ctx& ctx) const {
    if (x.rank() != 4 || x.dim(1) != 3) {
      throw ShapeError("backbone expects N x 3 x H x W input, got " + shape_str(x.shape()));
    }
    if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0) {
      throw ShapeError("backbone input height and width must be divisible by 8, got " +
                       shape_str(x.shape()));
    }
    auto h = stem_(x, ctx);
    if (cfg_.stem == StemKind::ResNet) h = max_pool2d(h, 3, 2, 1);
    BackboneOutput<T> out;
    for (int s = 0; s < 4; ++s) {
      for (const auto& block : stages_[s]) h = block(h, ctx);
      if (s + 1 == cfg_.tap_stage) out.tap = h;
    }
    out.final = h;
    return out;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    stem_.collect(prefix + "/stem", out);
    for (int s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].collect(prefix + "/stage" + std::to_string(s + 1) + "/block" + std::to_string(b), out);
      }
    }
  }

  std::int64_t num_parameters() const {
    std::int64_t n = stem_.num_parameters();
    for (const auto& st : stages_) {
      for (const auto& b : st) n += b.num_parameters();
    }
    return n;
  }

  const BackboneConfig& config() const { return cfg_; }
  ConvBn<T>& stem() { return stem_; }
  std::vector<Bottleneck<T>>& stage(int s) { return stages_.at(s); }

 private:
  BackboneConfig cfg_;
  ConvBn<T> stem_;
  std::array<std::vector<Bottleneck<T>>, 4> stages_;
};

/// Pushes a unit impulse at the centre of a size x size input through `net`
/// and returns the width (in input pixels) of the nonzero response along the
/// central output row, i.e. the count of nonzero output cells times the
/// network's output stride.
inline std::int64_t impulse_footprint(const std::function<Tensor<double>(const Tensor<double>&)>& net,
                                      std::int64_t channels, std::int64_t size) {
  auto x = Tensor<double>::zeros({1, channels, size, size});
  for (std::int64_t c = 0; c < channels; ++c) x.data()[(c * size + size / 2) * size + size / 2] = 1.0;
  auto y = net(x);
  const auto co = y.dim(1), ho = y.dim(2), wo = y.dim(3);
  const auto stride = size / wo;
  std::int64_t lo = wo, hi = -1;
  for (std::int64_t c = 0; c < co; ++c) {
    for (std::int64_t xx = 0; xx < wo; ++xx) {
      if (y.data()[(c * ho + ho / 2) * wo + xx] != 0.0) {
        lo = std::min(lo, xx);
        hi = std::max(hi, xx);
      }
    }
  }
  return hi < lo ? 0 : (hi - lo + 1) * stride;
}

/// Empirical footprint of a randomly initialized backbone with all conv
/// weights made positive, so no response cancels. BN runs in inference mode
/// with fresh statistics (a positive rescale).
inline std::int64_t receptive_field_probe(BackboneConfig cfg, std::int64_t size = 512,
                                          std::uint64_t seed = 0) {
  cfg.zero_init_residual = false;
  Rng rng(seed);
  Backbone<double> net(cfg, rng);
  NamedTensors<double> params;
  net.collect("backbone", params);
  for (auto& p : params) {
    if (p.name.ends_with("/weight")) {
      for (auto& v : p.tensor.data()) v = std::abs(v);
    }
  }
  return impulse_footprint([&](const Tensor<double>& x) { return net(x, Ctx::infer()).final; }, 3, size);
}

}  // namespace psp
