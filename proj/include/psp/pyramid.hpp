#pragma once

// Pyramid pooling: pool the feature map to several bin grids, optionally
// reduce each level to C / N channels, upsample back and concatenate with the
// input feature.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psp/layers.hpp"

namespace psp {

struct PyramidConfig {
  std::vector<int> bins{1, 2, 3, 6};
  PoolMode pool = PoolMode::Average;
  bool dim_reduce = true;

  std::int64_t levels() const { return static_cast<std::int64_t>(bins.size()); }

  /// Channels each level contributes for a C-channel input.
  std::int64_t level_channels(std::int64_t c) const { return dim_reduce ? c / levels() : c; }

  std::int64_t output_channels(std::int64_t c) const { return c + levels() * level_channels(c); }

  void validate(std::int64_t in_channels = 0) const {
    if (bins.empty()) throw ConfigError("pyramid: at least one bin size required");
    if (bins.front() != 1) throw ConfigError("pyramid: the coarsest level must be a single global bin");
    for (std::size_t i = 1; i < bins.size(); ++i) {
      if (bins[i] <= bins[i - 1]) throw ConfigError("pyramid: bin sizes must be strictly increasing");
    }
    if (in_channels > 0 && dim_reduce && in_channels / levels() < 1) {
      throw ConfigError("pyramid: " + std::to_string(in_channels) + " channels cannot be reduced over " +
                        std::to_string(levels()) + " levels");
    }
  }

  std::string tag() const {
    std::string s = "B";
    for (int b : bins) s += std::to_string(b);
    s += pool == PoolMode::Average ? "+AVE" : "+MAX";
    if (dim_reduce) s += "+DR";
    return s;
  }

  bool operator==(const PyramidConfig&) const = default;
};

template <typename T>
class PyramidPooling {
 public:
  PyramidPooling() = default;
  PyramidPooling(const PyramidConfig& cfg, std::int64_t in_channels, Rng& rng)
      : cfg_(cfg), in_channels_(in_channels) {
    cfg.validate(in_channels);
    if (cfg.dim_reduce) {
      auto out = cfg.level_channels(in_channels);
      for (std::size_t i = 0; i < cfg.bins.size(); ++i) {
        reduce_.emplace_back(ConvSpec{in_channels, out, 1, {1, 0, 1}}, rng);
      }
    }
  }

  Tensor<T> operator()(const Tensor<T>& feat, const Ctx& ctx) const {
    if (feat.rank() != 4 || feat.dim(1) != in_channels_) {
      throw ShapeError("pyramid pooling expects " + std::to_string(in_channels_) + " channels, got " +
                       shape_str(feat.shape()));
    }
    const auto h = feat.dim(2), w = feat.dim(3);
    if (cfg_.bins.back() > std::min(h, w)) {
      throw ShapeError("pyramid pooling: bin " + std::to_string(cfg_.bins.back()) +
                       " larger than feature map " + shape_str(feat.shape()));
    }
    std::vector<Tensor<T>> parts{feat};
    for (std::size_t i = 0; i < cfg_.bins.size(); ++i) {
      auto level = adaptive_pool(feat, cfg_.bins[i], cfg_.bins[i], cfg_.pool);
      if (cfg_.dim_reduce) level = reduce_[i](level, ctx);
      parts.push_back(bilinear_upsample(level, h, w));
    }
    return concat_channels(parts);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    for (std::size_t i = 0; i < reduce_.size(); ++i) {
      reduce_[i].collect(prefix + "/bin" + std::to_string(cfg_.bins[i]), out);
    }
  }

  std::int64_t num_parameters() const {
    std::int64_t n = 0;
    for (const auto& r : reduce_) n += r.num_parameters();
    return n;
  }

  std::int64_t output_channels() const { return cfg_.output_channels(in_channels_); }
  const PyramidConfig& config() const { return cfg_; }
  ConvBn<T>& reduction(std::size_t level) { return reduce_.at(level); }

 private:
  PyramidConfig cfg_;
  std::int64_t in_channels_ = 0;
  std::vector<ConvBn<T>> reduce_;
};

/// One configuration of the pooling ablation grid; `pyramid` is empty for the
/// baseline, which bypasses the module entirely.
struct AblationVariant {
  std::string name;
  std::optional<PyramidConfig> pyramid;
  // False for the two single-bin DR rows, which the usual six-row grid leaves out.
  bool published_row = true;
};

/// Baseline followed by {B1, B1236} x {MAX, AVE} x {no DR, DR}.
inline std::vector<AblationVariant> psp_ablation_variants() {
  std::vector<AblationVariant> out{{"Baseline", std::nullopt, true}};
  for (bool dr : {false, true}) {
    for (auto bins : {std::vector<int>{1}, std::vector<int>{1, 2, 3, 6}}) {
      for (auto mode : {PoolMode::Max, PoolMode::Average}) {
        PyramidConfig p{bins, mode, dr};
        // the six-row grid has no DR rows for the single-bin module
        out.push_back({p.tag(), p, !(dr && bins.size() == 1)});
      }
    }
  }
  return out;
}

}  // namespace psp
