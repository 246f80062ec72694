#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "psp/nn_ops.hpp"
#include "psp/tensor.hpp"

namespace psp {

using Rng = std::mt19937_64;

/// How a forward pass treats batch statistics and the graph.
struct Ctx {
  bool training = true;
  // When false, parameters enter the computation detached and no graph is kept.
  bool record = true;

  static Ctx train() { return {true, true}; }
  static Ctx infer() { return {false, false}; }
};

enum class EntryKind { Parameter, Buffer };

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  EntryKind kind = EntryKind::Parameter;
};

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

template <typename T>
Tensor<T> use_param(const Tensor<T>& p, const Ctx& ctx) {
  return ctx.record ? p : p.detach();
}

struct ConvSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel = 1;
  ConvGeometry geometry{};
  bool bias = false;
};

/// He-initialized convolution (normal, std = sqrt(2 / fan_in)); bias starts at 0.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const ConvSpec& spec, Rng& rng) : spec_(spec) {
    if (spec.in_channels < 1 || spec.out_channels < 1 || spec.kernel < 1) {
      throw ShapeError("Conv2d: channel counts and kernel must be positive");
    }
    auto fan_in = spec.in_channels * spec.kernel * spec.kernel;
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> w(static_cast<std::size_t>(spec.out_channels * fan_in));
    for (auto& v : w) v = static_cast<T>(nd(rng));
    weight_ = Tensor<T>::from_data({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel},
                                   std::move(w), true);
    if (spec.bias) bias_ = Tensor<T>::zeros({spec.out_channels}, true);
  }

  Tensor<T> operator()(const Tensor<T>& x, const Ctx& ctx) const {
    return conv2d(x, use_param(weight_, ctx), bias_.defined() ? use_param(bias_, ctx) : Tensor<T>(),
                  spec_.geometry);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.push_back({prefix + "/weight", weight_, EntryKind::Parameter});
    if (bias_.defined()) out.push_back({prefix + "/bias", bias_, EntryKind::Parameter});
  }

  std::int64_t num_parameters() const {
    return static_cast<std::int64_t>(weight_.numel() + (bias_.defined() ? bias_.numel() : 0));
  }

  const ConvSpec& spec() const { return spec_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  ConvSpec spec_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels, T momentum = T(0.1), T eps = T(1e-5))
      : gamma_(Tensor<T>::full({channels}, T(1), true)),
        beta_(Tensor<T>::zeros({channels}, true)),
        running_mean_(Tensor<T>::zeros({channels})),
        running_var_(Tensor<T>::full({channels}, T(1))),
        momentum_(momentum),
        eps_(eps) {}

  // Handles share storage, so training mode updates the running statistics
  // held by this layer even through the const call.
  Tensor<T> operator()(const Tensor<T>& x, const Ctx& ctx) const {
    auto rm = running_mean_;
    auto rv = running_var_;
    return batch_norm(x, use_param(gamma_, ctx), use_param(beta_, ctx), rm, rv, momentum_, eps_,
                      ctx.training);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.push_back({prefix + "/gamma", gamma_, EntryKind::Parameter});
    out.push_back({prefix + "/beta", beta_, EntryKind::Parameter});
    out.push_back({prefix + "/running_mean", running_mean_, EntryKind::Buffer});
    out.push_back({prefix + "/running_var", running_var_, EntryKind::Buffer});
  }

  std::int64_t num_parameters() const { return static_cast<std::int64_t>(2 * gamma_.numel()); }

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

 private:
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
  T momentum_ = T(0.1);
  T eps_ = T(1e-5);
};

/// Bias-free conv -> BN -> optional ReLU.
template <typename T>
class ConvBn {
 public:
  ConvBn() = default;
  ConvBn(const ConvSpec& spec, Rng& rng, bool relu_after = true)
      : conv_(without_bias(spec), rng), bn_(spec.out_channels), relu_(relu_after) {}

  Tensor<T> operator()(const Tensor<T>& x, const Ctx& ctx) const {
    auto y = bn_(conv_(x, ctx), ctx);
    return relu_ ? relu(y) : y;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    conv_.collect(prefix + "/conv", out);
    bn_.collect(prefix + "/bn", out);
  }

  std::int64_t num_parameters() const { return conv_.num_parameters() + bn_.num_parameters(); }

  Conv2d<T>& conv() { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

 private:
  static ConvSpec without_bias(ConvSpec s) {
    s.bias = false;
    return s;
  }

  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  bool relu_ = true;
};

}  // namespace psp
