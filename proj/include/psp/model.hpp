#pragma once

// Full network: dilated backbone -> pyramid pooling -> 3x3 conv/BN/ReLU ->
// 1x1 classifier, with an auxiliary classifier on an intermediate stage that
// only participates in training.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "psp/backbone.hpp"
#include "psp/layers.hpp"
#include "psp/pyramid.hpp"

namespace psp {

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::toy();
  // Empty: no pyramid module (the dilated-FCN baseline).
  std::optional<PyramidConfig> pyramid = PyramidConfig{};
  int num_classes = 4;
  bool aux_enabled = true;
  double aux_weight = 0.4;
  int head_channels = 32;

  static ModelConfig toy(int num_classes) {
    ModelConfig c;
    c.num_classes = num_classes;
    return c;
  }

  static ModelConfig resnet50(int num_classes) {
    ModelConfig c;
    c.backbone = BackboneConfig::resnet50();
    c.num_classes = num_classes;
    c.head_channels = 512;
    return c;
  }

  void validate() const {
    backbone.validate();
    if (pyramid) pyramid->validate(backbone.final_channels());
    if (num_classes < 1 || num_classes > 255) throw ConfigError("num_classes must be in 1..255");
    if (!(aux_weight >= 0.0 && aux_weight <= 1.0)) throw ConfigError("aux_weight must be in [0, 1]");
    if (head_channels < 1) throw ConfigError("head_channels must be positive");
  }

  /// Canonical architecture description. The auxiliary settings are left out
  /// so a pruned model keeps the identity of the network it came from.
  std::string architecture() const {
    std::ostringstream os;
    const auto& b = backbone;
    os << "blocks=" << b.stage_blocks[0] << ',' << b.stage_blocks[1] << ',' << b.stage_blocks[2] << ','
       << b.stage_blocks[3] << ";base=" << b.base_channels << ";mult=" << b.out_multiplier
       << ";ratio=" << b.bottleneck_ratio << ";stem=" << (b.stem == StemKind::Toy ? "toy" : "resnet")
       << ";strides=" << b.strides[0] << ',' << b.strides[1] << ',' << b.strides[2] << ',' << b.strides[3]
       << ";dilations=" << b.dilations[0] << ',' << b.dilations[1] << ',' << b.dilations[2] << ','
       << b.dilations[3] << ";tap=" << b.tap_stage;
    if (pyramid) {
      os << ";psp=" << pyramid->tag();
    } else {
      os << ";psp=none";
    }
    os << ";classes=" << num_classes << ";head=" << head_channels;
    return os.str();
  }
};

template <typename T>
struct Prediction {
  Tensor<T> logits;       // N x K x H x W at input resolution
  std::vector<T> probs;   // softmax of logits, same layout
  LabelMap labels;        // per-pixel argmax, lowest class on ties
};

template <typename T>
struct TrainLosses {
  Tensor<T> total;
  Tensor<T> main;
  Tensor<T> aux;  // zero scalar when the auxiliary branch is disabled
};

/// conv3x3 -> BN -> ReLU -> conv1x1 (with bias) to class scores.
template <typename T>
class SegHead {
 public:
  SegHead() = default;
  SegHead(std::int64_t in, std::int64_t mid, std::int64_t classes, Rng& rng)
      : body_({in, mid, 3, {1, 1, 1}}, rng), classifier_({mid, classes, 1, {1, 0, 1}, true}, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const Ctx& ctx) const { return classifier_(body_(x, ctx), ctx); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    body_.collect(prefix + "/body", out);
    classifier_.collect(prefix + "/classifier", out);
  }

  std::int64_t num_parameters() const { return body_.num_parameters() + classifier_.num_parameters(); }

  Conv2d<T>& classifier() { return classifier_; }

 private:
  ConvBn<T> body_;
  Conv2d<T> classifier_;
};

template <typename T>
class PSPNet {
 public:
  PSPNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    backbone_ = Backbone<T>(cfg.backbone, rng);
    auto feat = static_cast<std::int64_t>(cfg.backbone.final_channels());
    if (cfg.pyramid) {
      pyramid_ = PyramidPooling<T>(*cfg.pyramid, feat, rng);
      feat = pyramid_.output_channels();
    }
    head_ = SegHead<T>(feat, cfg.head_channels, cfg.num_classes, rng);
    // The auxiliary head draws from its own stream so enabling it leaves every
    // main-path weight unchanged for a given seed.
    if (cfg.aux_enabled) {
      Rng aux_rng(seed ^ 0x9e3779b97f4a7c15ULL);
      aux_ = SegHead<T>(cfg.backbone.tap_channels(), cfg.head_channels, cfg.num_classes, aux_rng);
    }
  }

  PSPNet(const PSPNet&) = delete;
  PSPNet& operator=(const PSPNet&) = delete;
  PSPNet(PSPNet&&) = default;
  PSPNet& operator=(PSPNet&&) = default;

  /// Main-branch logits at input resolution.
  Tensor<T> logits(const Tensor<T>& x, const Ctx& ctx) const {
    auto feats = backbone_(x, ctx);
    return main_logits(feats.final, x, ctx);
  }

  /// Training-mode forward with both losses; total = main + aux_weight * aux.
  TrainLosses<T> forward_train(const Tensor<T>& x, const LabelMap& labels, const Ctx& ctx = Ctx::train()) const {
    validate_labels(labels, cfg_.num_classes);
    auto feats = backbone_(x, ctx);
    TrainLosses<T> out;
    out.main = softmax_cross_entropy(main_logits(feats.final, x, ctx), labels);
    if (cfg_.aux_enabled) {
      auto aux_logits = bilinear_upsample(aux_(feats.tap, ctx), x.dim(2), x.dim(3));
      out.aux = softmax_cross_entropy(aux_logits, labels);
      out.total = add(out.main, scale(out.aux, static_cast<T>(cfg_.aux_weight)));
    } else {
      out.aux = Tensor<T>::scalar(T(0));
      out.total = out.main;
    }
    return out;
  }

  /// Inference with running BN statistics; the auxiliary branch is never run.
  Prediction<T> forward_infer(const Tensor<T>& x) const {
    Prediction<T> p;
    p.logits = logits(x, Ctx::infer());
    const auto n = p.logits.dim(0), k = p.logits.dim(1), h = p.logits.dim(2), w = p.logits.dim(3);
    p.probs = softmax_channels<T>(p.logits.data(), n, k, h * w);
    p.labels = argmax_channels<T>(p.logits.data(), n, k, h, w);
    return p;
  }

  /// Parameters and buffers sorted by name.
  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out;
    backbone_.collect("backbone", out);
    if (cfg_.pyramid) pyramid_.collect("psp", out);
    head_.collect("head", out);
    if (cfg_.aux_enabled) aux_.collect("aux", out);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
  }

  NamedTensors<T> parameters() const {
    auto all = named_tensors();
    std::erase_if(all, [](const auto& e) { return e.kind != EntryKind::Parameter; });
    return all;
  }

  std::int64_t num_parameters() const {
    std::int64_t n = backbone_.num_parameters() + head_.num_parameters();
    if (cfg_.pyramid) n += pyramid_.num_parameters();
    if (cfg_.aux_enabled) n += aux_.num_parameters();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  const ModelConfig& config() const { return cfg_; }
  Backbone<T>& backbone() { return backbone_; }
  PyramidPooling<T>& pyramid() { return pyramid_; }
  SegHead<T>& head() { return head_; }
  SegHead<T>& aux_head() { return aux_; }

 private:
  Tensor<T> main_logits(const Tensor<T>& final, const Tensor<T>& x, const Ctx& ctx) const {
    auto f = cfg_.pyramid ? pyramid_(final, ctx) : final;
    return bilinear_upsample(head_(f, ctx), x.dim(2), x.dim(3));
  }

  ModelConfig cfg_;
  Backbone<T> backbone_;
  PyramidPooling<T> pyramid_;
  SegHead<T> head_;
  SegHead<T> aux_;
};

/// Learnable parameter census of the network a config describes.
inline std::int64_t count_parameters(const ModelConfig& cfg) {
  return PSPNet<float>(cfg, 0).num_parameters();
}

}  // namespace psp
