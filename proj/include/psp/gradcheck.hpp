#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "psp/tensor.hpp"

namespace psp {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Relative error with the denominator floored at 1e-8.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline const std::vector<double> kStepLadder{1e-4, 1e-5, 1e-6, 1e-7};

struct GradCheckOptions {
  // Step sizes tried per coordinate; the closest agreement counts. One step
  // cannot suit every coordinate of a deep network: large steps cross ReLU
  // kinks, small ones drown near-zero gradients in roundoff.
  std::vector<double> eps{1e-6};
  // When nonzero, at most this many coordinates per tensor are sampled
  // (without replacement) using `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every tensor in `inputs`.
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                                  const GradCheckOptions& opt) {
  if (opt.eps.empty()) throw std::invalid_argument("finite_diff_check: no step size given");
  for (auto& t : inputs) t.zero_grad();
  auto loss = f();
  loss.backward();

  GradCheckResult r;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& x = inputs[ti];
    std::vector<T> analytic(x.numel(), T(0));
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (opt.max_coords && coords.size() > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords);
    }
    auto d = x.data();
    for (auto i : coords) {
      const T orig = d[i];
      double err = std::numeric_limits<double>::infinity(), numeric = 0.0;
      for (double eps : opt.eps) {
        d[i] = static_cast<T>(orig + eps);
        double fp = f().item();
        d[i] = static_cast<T>(orig - eps);
        double fm = f().item();
        d[i] = orig;
        double num = (fp - fm) / (2.0 * eps);
        double e = relative_error(analytic[i], num);
        if (e < err) {
          err = e;
          numeric = num;
        }
      }
      ++r.coords_checked;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_tensor = ti;
        r.worst_index = i;
        r.worst_analytic = analytic[i];
        r.worst_numeric = numeric;
      }
    }
    x.zero_grad();
  }
  return r;
}

template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                                  double eps, std::size_t max_coords = 0, std::uint64_t seed = 0) {
  return finite_diff_check<T>(f, std::move(inputs), GradCheckOptions{{eps}, max_coords, seed});
}

/// Single-input form: `f` maps x to a scalar.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double eps) {
  return finite_diff_check<T>([&] { return f(x); }, {x}, eps).max_rel_error;
}

}  // namespace psp
