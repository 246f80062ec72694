#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "psp/error.hpp"
#include "psp/layers.hpp"

namespace psp {

struct OptimConfig {
  double base_lr = 0.01;
  double power = 0.9;
  std::int64_t max_iter = 2000;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (!(power > 0)) throw ConfigError("power must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (max_iter < 1) throw ConfigError("max_iter must be at least 1");
  }
};

/// base_lr * (1 - iter / max_iter)^power for 0 <= iter <= max_iter.
inline double poly_lr(std::int64_t iter, const OptimConfig& cfg) {
  if (iter < 0 || iter > cfg.max_iter) {
    throw std::out_of_range("poly_lr: iter " + std::to_string(iter) + " outside [0, " +
                            std::to_string(cfg.max_iter) + "]");
  }
  if (iter == cfg.max_iter) return 0.0;
  return cfg.base_lr *
         std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter), cfg.power);
}

inline const std::string kOptimPrefix = "optim/";

/// Heavy-ball SGD: g = grad + wd * p; v = mu * v + g; p -= lr * v.
/// Weight decay applies uniformly to every parameter, BN affine terms included.
template <typename T>
class SGD {
 public:
  explicit SGD(const OptimConfig& cfg) : cfg_(cfg) { cfg.validate(); }

  /// Parameters with no gradient (unreached by the loss) are treated as having a zero gradient.
  void step(const NamedTensors<T>& params, double lr) {
    const T mu = static_cast<T>(cfg_.momentum);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T rate = static_cast<T>(lr);
    for (const auto& entry : params) {
      if (entry.kind != EntryKind::Parameter) continue;
      auto p = entry.tensor;
      auto& v = buffer(entry.name, p.shape());
      auto pd = p.data();
      auto vd = v.data();
      const bool has = p.has_grad();
      std::span<const T> g = has ? p.grad() : std::span<const T>{};
      for (std::size_t i = 0; i < pd.size(); ++i) {
        T gi = (has ? g[i] : T(0)) + wd * pd[i];
        vd[i] = mu * vd[i] + gi;
        pd[i] -= rate * vd[i];
      }
    }
  }

  /// Momentum buffers named "optim/<parameter name>", sorted.
  NamedTensors<T> state() const {
    NamedTensors<T> out;
    for (const auto& [name, t] : momentum_) out.push_back({kOptimPrefix + name, t, EntryKind::Buffer});
    return out;
  }

  /// Replaces the momentum buffers; names must carry the "optim/" prefix.
  void load_state(const NamedTensors<T>& entries) {
    momentum_.clear();
    for (const auto& e : entries) {
      if (!e.name.starts_with(kOptimPrefix)) {
        throw std::invalid_argument("optimizer state entry '" + e.name + "' lacks the optim/ prefix");
      }
      momentum_[e.name.substr(kOptimPrefix.size())] = e.tensor.clone();
    }
  }

  const OptimConfig& config() const { return cfg_; }

 private:
  Tensor<T>& buffer(const std::string& name, const Shape& shape) {
    auto it = momentum_.find(name);
    if (it == momentum_.end()) it = momentum_.emplace(name, Tensor<T>::zeros(shape)).first;
    if (it->second.shape() != shape) {
      throw ShapeError("momentum buffer for " + name + " has shape " + shape_str(it->second.shape()) +
                       ", parameter has " + shape_str(shape));
    }
    return it->second;
  }

  OptimConfig cfg_;
  std::map<std::string, Tensor<T>> momentum_;
};

}  // namespace psp
