#pragma once

// Test-only reference implementations, written independently of the
// library code paths they check.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "psp/nn_ops.hpp"
#include "psp/tensor.hpp"

namespace psp::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false,
                        double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(v), requires_grad);
}

// Six nested loops of direct summation.
template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeometry& g) {
  auto n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  auto co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  auto ho = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
  auto wo = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
  std::vector<T> out(static_cast<std::size_t>(n * co * ho * wo));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t y = 0; y < ho; ++y)
        for (std::int64_t xo = 0; xo < wo; ++xo) {
          double acc = b.defined() ? b.data()[o] : 0.0;
          for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                auto iy = y * g.stride - g.padding + ky * g.dilation;
                auto ix = xo * g.stride - g.padding + kx * g.dilation;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += double(x.data()[((i * c + ci) * h + iy) * wd + ix]) *
                       double(w.data()[((o * c + ci) * kh + ky) * kw + kx]);
              }
          out[((i * co + o) * ho + y) * wo + xo] = static_cast<T>(acc);
        }
  return Tensor<T>::from_data({n, co, ho, wo}, std::move(out));
}

// Per-bin reduction with boundaries computed in floating point.
template <typename T>
std::vector<double> enumerate_bins(const Tensor<T>& x, int bh, int bw, PoolMode mode) {
  auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out;
  for (std::int64_t p = 0; p < n * c; ++p)
    for (int by = 0; by < bh; ++by)
      for (int bx = 0; bx < bw; ++bx) {
        auto y0 = static_cast<std::int64_t>(std::floor(double(by) * h / bh));
        auto y1 = static_cast<std::int64_t>(std::ceil(double(by + 1) * h / bh));
        auto x0 = static_cast<std::int64_t>(std::floor(double(bx) * w / bw));
        auto x1 = static_cast<std::int64_t>(std::ceil(double(bx + 1) * w / bw));
        double acc = mode == PoolMode::Max ? -1e300 : 0.0;
        int count = 0;
        for (auto yy = y0; yy < y1; ++yy)
          for (auto xx = x0; xx < x1; ++xx) {
            double v = x.data()[(p * h + yy) * w + xx];
            acc = mode == PoolMode::Max ? std::max(acc, v) : acc + v;
            ++count;
          }
        out.push_back(mode == PoolMode::Max ? acc : acc / count);
      }
  return out;
}

}  // namespace psp::testing
