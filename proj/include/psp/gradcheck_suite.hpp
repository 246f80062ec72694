#pragma once

// The double-precision gradient-check suite behind `psp_cli gradcheck`: every
// layer op plus an end-to-end micro model, each over a range of seeds.

#include <chrono>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "psp/gradcheck.hpp"
#include "psp/model.hpp"
#include "psp/nn_ops.hpp"
#include "psp/pyramid.hpp"

namespace psp {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

struct GradCheckReport {
  std::string name;
  double worst_error = 0;
  std::uint64_t worst_seed = 0;
  int seeds = 0;
  bool passed = true;
};

namespace gc {

inline Tensor<double> uniform(Shape shape, std::mt19937_64& rng, bool grad = false) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor<double>::from_data(std::move(shape), std::move(v), grad);
}

inline GradCheckOptions ladder(std::size_t max_coords = 0, std::uint64_t seed = 0) {
  return {kStepLadder, max_coords, seed};
}

inline ModelConfig micro_model_config() {
  auto c = ModelConfig::toy(3);
  c.backbone.stage_blocks = {1, 1, 1, 1};
  c.backbone.base_channels = 8;
  c.pyramid = PyramidConfig{{1, 2}, PoolMode::Average, true};
  c.head_channels = 8;
  return c;
}

}  // namespace gc

/// Gradient check of conv2d as computed by `conv`; the suite passes conv2d
/// itself, and tests substitute broken variants.
inline GradCheckCase conv_case(
    std::string name,
    std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                 const ConvGeometry&)>
        conv) {
  return {std::move(name), [conv](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            auto x = gc::uniform({2, 3, 7, 6}, rng, true);
            auto w = gc::uniform({4, 3, 3, 3}, rng, true);
            auto b = gc::uniform({4}, rng, true);
            auto pr = gc::uniform({2, 4, 4, 3}, rng);
            auto f = [&] { return sum(mul(conv(x, w, b, {2, 2, 2}), pr)); };
            return finite_diff_check<double>(f, {x, w, b}, gc::ladder());
          }};
}

inline std::vector<GradCheckCase> default_gradcheck_cases() {
  using Td = Tensor<double>;
  std::vector<GradCheckCase> cases;
  cases.push_back({"elementwise", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto a = gc::uniform({2, 3, 2, 2}, rng, true);
                     auto b = gc::uniform({3}, rng, true);
                     auto c = gc::uniform({2, 2}, rng, true);
                     auto f = [&] { return mean(relu(mul(sub(mul(add(a, b), c), scale(b, 0.5)), a))); };
                     return finite_diff_check<double>(f, {a, b, c}, gc::ladder());
                   }});
  cases.push_back({"matmul", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto a = gc::uniform({3, 4}, rng, true);
                     auto b = gc::uniform({4, 2}, rng, true);
                     auto pr = gc::uniform({6}, rng);
                     auto f = [&] { return sum(mul(reshape(matmul(a, b), {6}), pr)); };
                     return finite_diff_check<double>(f, {a, b}, gc::ladder());
                   }});
  cases.push_back(conv_case("conv2d", [](const Td& x, const Td& w, const Td& b, const ConvGeometry& g) {
    return conv2d(x, w, b, g);
  }));
  cases.push_back({"conv2d_dilated_same", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = gc::uniform({1, 2, 6, 6}, rng, true);
                     auto w = gc::uniform({3, 2, 3, 3}, rng, true);
                     auto pr = gc::uniform({1, 3, 6, 6}, rng);
                     auto f = [&] { return sum(mul(conv2d(x, w, ConvGeometry{1, 2, 2}), pr)); };
                     return finite_diff_check<double>(f, {x, w}, gc::ladder());
                   }});
  for (bool training : {true, false}) {
    cases.push_back({training ? "batch_norm_train" : "batch_norm_infer", [training](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       auto x = gc::uniform({2, 3, 3, 3}, rng, true);
                       auto gamma = gc::uniform({3}, rng, true);
                       auto beta = gc::uniform({3}, rng, true);
                       auto pr = gc::uniform({2, 3, 3, 3}, rng);
                       auto f = [&] {
                         // fresh running statistics each call keep the function pure
                         auto rm = Td::full({3}, 0.1), rv = Td::full({3}, 0.8);
                         return sum(mul(batch_norm(x, gamma, beta, rm, rv, 0.1, 1e-5, training), pr));
                       };
                       return finite_diff_check<double>(f, {x, gamma, beta}, gc::ladder());
                     }});
  }
  for (auto mode : {PoolMode::Average, PoolMode::Max}) {
    cases.push_back({mode == PoolMode::Average ? "adaptive_avg_pool" : "adaptive_max_pool", [mode](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       auto x = gc::uniform({1, 2, 7, 5}, rng, true);
                       auto pr = gc::uniform({1, 2, 3, 2}, rng);
                       auto f = [&] { return sum(mul(adaptive_pool(x, 3, 2, mode), pr)); };
                       return finite_diff_check<double>(f, {x}, gc::ladder());
                     }});
  }
  cases.push_back({"max_pool2d", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = gc::uniform({1, 2, 6, 6}, rng, true);
                     auto pr = gc::uniform({1, 2, 3, 3}, rng);
                     auto f = [&] { return sum(mul(max_pool2d(x, 3, 2, 1), pr)); };
                     return finite_diff_check<double>(f, {x}, gc::ladder());
                   }});
  cases.push_back({"bilinear_upsample", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = gc::uniform({1, 2, 3, 2}, rng, true);
                     auto pr = gc::uniform({1, 2, 7, 5}, rng);
                     auto f = [&] { return sum(mul(bilinear_upsample(x, 7, 5), pr)); };
                     return finite_diff_check<double>(f, {x}, gc::ladder());
                   }});
  cases.push_back({"concat_channels", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto a = gc::uniform({2, 1, 3, 3}, rng, true);
                     auto b = gc::uniform({2, 2, 3, 3}, rng, true);
                     auto pr = gc::uniform({2, 3, 3, 3}, rng);
                     auto f = [&] { return sum(mul(concat_channels<double>({a, b}), pr)); };
                     return finite_diff_check<double>(f, {a, b}, gc::ladder());
                   }});
  cases.push_back({"softmax_cross_entropy", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     auto x = gc::uniform({2, 4, 3, 3}, rng, true);
                     LabelMap y(2, 3, 3);
                     for (auto& v : y.data) v = rng() % 5 == 0 ? kIgnoreLabel : static_cast<std::int32_t>(rng() % 4);
                     auto f = [&] { return softmax_cross_entropy(x, y); };
                     return finite_diff_check<double>(f, {x}, gc::ladder());
                   }});
  cases.push_back({"pyramid_pooling", [](std::uint64_t seed) {
                     Rng init(seed);
                     PyramidPooling<double> ppm({{1, 2, 3}, PoolMode::Average, true}, 8, init);
                     std::mt19937_64 rng(seed + 200);
                     NamedTensors<double> named;
                     ppm.collect("psp", named);
                     std::vector<Td> inputs;
                     for (auto& e : named) {
                       if (e.kind == EntryKind::Parameter) inputs.push_back(e.tensor);
                     }
                     auto x = gc::uniform({4, 8, 6, 6}, rng, true);
                     inputs.insert(inputs.begin(), x);
                     auto pr = gc::uniform({4, 14, 6, 6}, rng);
                     auto f = [&] { return sum(mul(ppm(x, Ctx::train()), pr)); };
                     return finite_diff_check<double>(f, inputs, gc::ladder());
                   }});
  cases.push_back({"pspnet_micro_e2e", [](std::uint64_t seed) {
                     PSPNet<double> net(gc::micro_model_config(), seed);
                     std::mt19937_64 rng(seed + 1000);
                     auto x = gc::uniform({4, 3, 16, 16}, rng, true);
                     LabelMap y(4, 16, 16);
                     for (auto& v : y.data) v = static_cast<std::int32_t>(rng() % 3);
                     std::vector<Td> inputs{x};
                     for (const auto& p : net.parameters()) inputs.push_back(p.tensor);
                     auto f = [&] { return net.forward_train(x, y).total; };
                     return finite_diff_check<double>(f, inputs, gc::ladder(3, seed));
                   }});
  return cases;
}

/// Runs every case for seeds [0, seeds) and returns one report per case.
/// With `log`, prints one key=value line per case.
inline std::vector<GradCheckReport> run_gradcheck_suite(const std::vector<GradCheckCase>& cases, int seeds,
                                                        std::ostream* log = nullptr,
                                                        double tolerance = kGradCheckTolerance) {
  std::vector<GradCheckReport> out;
  for (const auto& c : cases) {
    GradCheckReport r;
    r.name = c.name;
    r.seeds = seeds;
    const auto t0 = std::chrono::steady_clock::now();
    for (int s = 0; s < seeds; ++s) {
      auto res = c.run(static_cast<std::uint64_t>(s));
      if (s == 0 || res.max_rel_error > r.worst_error) {
        r.worst_error = res.max_rel_error;
        r.worst_seed = static_cast<std::uint64_t>(s);
      }
    }
    r.passed = r.worst_error < tolerance;
    if (log) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      *log << "gradcheck op=" << r.name << " seeds=" << r.seeds << " max_rel_error=" << r.worst_error
           << " worst_seed=" << r.worst_seed << " status=" << (r.passed ? "pass" : "FAIL") << " ms=" << ms << '\n';
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace psp
