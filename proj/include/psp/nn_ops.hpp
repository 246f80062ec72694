#pragma once

// Layer primitives on N x C x H x W tensors. Each op is a pure function of its
// inputs apart from batch_norm's running-statistics update.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "psp/error.hpp"
#include "psp/gemm.hpp"
#include "psp/label_map.hpp"
#include "psp/tensor.hpp"

namespace psp {

struct ConvGeometry {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t dilation = 1;
};

inline std::int64_t conv_out_size(std::int64_t in, std::int64_t kernel, const ConvGeometry& g) {
  return (in + 2 * g.padding - g.dilation * (kernel - 1) - 1) / g.stride + 1;
}

enum class PoolMode { Max, Average };

namespace detail {

inline void require_4d(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected N x C x H x W, got " + shape_str(s));
}

template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t ho, std::int64_t wo, const ConvGeometry& g, T* col) {
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          std::int64_t iy = oy * g.stride - g.padding + ki * g.dilation;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (ci * h + iy) * w;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            std::int64_t ix = ox * g.stride - g.padding + kj * g.dilation;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
                std::int64_t kw, std::int64_t ho, std::int64_t wo, const ConvGeometry& g, T* x) {
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          std::int64_t iy = oy * g.stride - g.padding + ki * g.dilation;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (ci * h + iy) * w;
          const T* src = row + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            std::int64_t ix = ox * g.stride - g.padding + kj * g.dilation;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Align-corners source coordinate for output index `dst`.
template <typename T>
struct Interp {
  std::int64_t i0;
  std::int64_t i1;
  T frac;
};

template <typename T>
Interp<T> align_corners(std::int64_t dst, std::int64_t in, std::int64_t out) {
  if (out <= 1 || in <= 1) return {0, 0, T(0)};
  T pos = static_cast<T>(dst) * static_cast<T>(in - 1) / static_cast<T>(out - 1);
  auto i0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(pos)), in - 1);
  auto i1 = std::min<std::int64_t>(i0 + 1, in - 1);
  return {i0, i1, pos - static_cast<T>(i0)};
}

}  // namespace detail

/// Cross-correlation with dilated taps. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvGeometry& g) {
  detail::require_4d(x.shape(), "conv2d");
  if (weight.rank() != 4) throw ShapeError("conv2d: weight must be 4-D, got " + shape_str(weight.shape()));
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels, weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (g.stride < 1 || g.dilation < 1 || g.padding < 0) throw ShapeError("conv2d: invalid geometry");
  const auto ho = conv_out_size(h, kh, g), wo = conv_out_size(w, kw, g);
  if (ho < 1 || wo < 1) {
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(x.shape()) +
                     " and kernel " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(co) +
                     " output channels");
  }
  const bool direct = kh == 1 && kw == 1 && g.stride == 1 && g.padding == 0;
  const auto ck = c * kh * kw, hw = ho * wo;

  std::vector<T> out(static_cast<std::size_t>(n * co * hw));
  std::vector<T> col(direct ? 0 : static_cast<std::size_t>(ck * hw));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xi = xd + i * c * h * w;
    const T* ci = xi;
    if (!direct) {
      detail::im2col(xi, c, h, w, kh, kw, ho, wo, g, col.data());
      ci = col.data();
    }
    T* oi = out.data() + i * co * hw;
    detail::gemm<T>(false, false, co, hw, ck, wd, ci, oi, false);
    if (bias.defined()) {
      auto bd = bias.data();
      for (std::int64_t o = 0; o < co; ++o) {
        for (std::int64_t p = 0; p < hw; ++p) oi[o * hw + p] += bd[o];
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto xn = x.node();
  auto wn = weight.node();
  return record_op<T>(
      "conv2d", {n, co, ho, wo}, std::move(out), inputs,
      [=](std::span<const T> gout, std::span<const std::span<T>> gi) {
        const T* xv = xn->storage->data();
        const T* wv = wn->storage->data();
        std::vector<T> buf(direct ? 0 : static_cast<std::size_t>(ck * hw));
        for (std::int64_t i = 0; i < n; ++i) {
          const T* go = gout.data() + i * co * hw;
          const T* xi = xv + i * c * h * w;
          if (!gi[1].empty()) {
            const T* ci = xi;
            if (!direct) {
              detail::im2col(xi, c, h, w, kh, kw, ho, wo, g, buf.data());
              ci = buf.data();
            }
            detail::gemm<T>(false, true, co, ck, hw, go, ci, gi[1].data(), true);
          }
          if (!gi[0].empty()) {
            T* dx = gi[0].data() + i * c * h * w;
            if (direct) {
              detail::gemm<T>(true, false, ck, hw, co, wv, go, dx, true);
            } else {
              detail::gemm<T>(true, false, ck, hw, co, wv, go, buf.data(), false);
              detail::col2im_add(buf.data(), c, h, w, kh, kw, ho, wo, g, dx);
            }
          }
          if (gi.size() > 2 && !gi[2].empty()) {
            for (std::int64_t o = 0; o < co; ++o) {
              T acc = 0;
              for (std::int64_t p = 0; p < hw; ++p) acc += go[o * hw + p];
              gi[2][o] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const ConvGeometry& g) {
  return conv2d(x, weight, Tensor<T>(), g);
}

/// Batch normalization over N, H, W per channel. In training mode the batch
/// statistics normalize and the running statistics move by
/// running = (1 - momentum) * running + momentum * batch (unbiased variance).
/// In inference mode only the running statistics are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                     bool training) {
  detail::require_4d(x.shape(), "batch_norm");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->rank() != 1 || p->dim(0) != c) {
      throw ShapeError("batch_norm: parameter " + shape_str(p->shape()) + " for input " +
                       shape_str(x.shape()));
    }
  }
  const auto m = n * hw;
  if (training && m < 2) {
    throw ShapeError("batch_norm: training needs at least 2 values per channel, input " +
                     shape_str(x.shape()));
  }
  const T* xd = x.data().data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv(static_cast<std::size_t>(c));

  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = xd + (i * c + ch) * hw;
        for (std::int64_t k = 0; k < hw; ++k) s += p[k];
      }
      double dm = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* p = xd + (i * c + ch) * hw;
        for (std::int64_t k = 0; k < hw; ++k) {
          double d = p[k] - dm;
          ss += d * d;
        }
      }
      double dv = ss / static_cast<double>(m);
      mu = static_cast<T>(dm);
      var = static_cast<T>(dv);
      auto rm = running_mean.data();
      auto rv = running_var.data();
      rm[ch] = (T(1) - momentum) * rm[ch] + momentum * mu;
      rv[ch] = (T(1) - momentum) * rv[ch] +
               momentum * static_cast<T>(ss / static_cast<double>(m - 1));
    } else {
      mu = running_mean.data()[ch];
      var = running_var.data()[ch];
    }
    inv[ch] = T(1) / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < n; ++i) {
      auto base = (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) {
        T xh = (xd[base + k] - mu) * inv[ch];
        xhat[base + k] = xh;
        out[base + k] = gd[ch] * xh + bd[ch];
      }
    }
  }

  auto gn = gamma.node();
  return record_op<T>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv = std::move(inv)](std::span<const T> g,
                                                        std::span<const std::span<T>> gi) {
        const auto& gv = *gn->storage;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::int64_t i = 0; i < n; ++i) {
            auto base = (i * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) {
              sg += g[base + k];
              sgx += static_cast<double>(g[base + k]) * xhat[base + k];
            }
          }
          if (!gi[1].empty()) gi[1][ch] += static_cast<T>(sgx);
          if (!gi[2].empty()) gi[2][ch] += static_cast<T>(sg);
          if (gi[0].empty()) continue;
          T scale = gv[ch] * inv[ch];
          T mg = static_cast<T>(sg / static_cast<double>(m));
          T mgx = static_cast<T>(sgx / static_cast<double>(m));
          for (std::int64_t i = 0; i < n; ++i) {
            auto base = (i * c + ch) * hw;
            for (std::int64_t k = 0; k < hw; ++k) {
              if (training) {
                gi[0][base + k] += scale * (g[base + k] - mg - xhat[base + k] * mgx);
              } else {
                gi[0][base + k] += scale * g[base + k];
              }
            }
          }
        }
      });
}

/// Strided max pooling with implicit -inf padding. Ties route the gradient to
/// the lowest linear index.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::int64_t kernel, std::int64_t stride,
                     std::int64_t padding) {
  detail::require_4d(x.shape(), "max_pool2d");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  ConvGeometry g{stride, padding, 1};
  const auto ho = conv_out_size(h, kernel, g), wo = conv_out_size(w, kernel, g);
  if (ho < 1 || wo < 1) throw ShapeError("max_pool2d: non-positive output for " + shape_str(x.shape()));
  std::vector<T> out(static_cast<std::size_t>(n * c * ho * wo));
  std::vector<std::int64_t> arg(out.size());
  const T* xd = x.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* plane = xd + p * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t bi = -1;
        for (std::int64_t ky = 0; ky < kernel; ++ky) {
          auto iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t kx = 0; kx < kernel; ++kx) {
            auto ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            if (bi < 0 || plane[iy * w + ix] > best) {
              best = plane[iy * w + ix];
              bi = iy * w + ix;
            }
          }
        }
        auto o = (p * ho + oy) * wo + ox;
        out[o] = best;
        arg[o] = p * h * w + bi;
      }
    }
  }
  return record_op<T>("max_pool2d", {n, c, ho, wo}, std::move(out), {x},
                      [arg = std::move(arg)](std::span<const T> gout, std::span<const std::span<T>> gi) {
                        for (std::size_t o = 0; o < gout.size(); ++o) gi[0][arg[o]] += gout[o];
                      });
}

/// Bin i along an axis of length `extent` split into `bins` covers
/// [floor(i * extent / bins), ceil((i + 1) * extent / bins)).
inline std::pair<std::int64_t, std::int64_t> adaptive_bin(std::int64_t i, std::int64_t extent,
                                                          std::int64_t bins) {
  return {(i * extent) / bins, ((i + 1) * extent + bins - 1) / bins};
}

template <typename T>
Tensor<T> adaptive_pool(const Tensor<T>& x, std::int64_t bins_h, std::int64_t bins_w, PoolMode mode) {
  detail::require_4d(x.shape(), "adaptive_pool");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (bins_h < 1 || bins_w < 1 || bins_h > h || bins_w > w) {
    throw ShapeError("adaptive_pool: bins " + std::to_string(bins_h) + "x" + std::to_string(bins_w) +
                     " exceed spatial extent of " + shape_str(x.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(n * c * bins_h * bins_w));
  std::vector<std::int64_t> arg(mode == PoolMode::Max ? out.size() : 0);
  const T* xd = x.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* plane = xd + p * h * w;
    for (std::int64_t by = 0; by < bins_h; ++by) {
      auto [y0, y1] = adaptive_bin(by, h, bins_h);
      for (std::int64_t bx = 0; bx < bins_w; ++bx) {
        auto [x0, x1] = adaptive_bin(bx, w, bins_w);
        auto o = (p * bins_h + by) * bins_w + bx;
        if (mode == PoolMode::Max) {
          T best = plane[y0 * w + x0];
          std::int64_t bi = y0 * w + x0;
          for (auto yy = y0; yy < y1; ++yy) {
            for (auto xx = x0; xx < x1; ++xx) {
              if (plane[yy * w + xx] > best) {
                best = plane[yy * w + xx];
                bi = yy * w + xx;
              }
            }
          }
          out[o] = best;
          arg[o] = p * h * w + bi;
        } else {
          double s = 0.0;
          for (auto yy = y0; yy < y1; ++yy) {
            for (auto xx = x0; xx < x1; ++xx) s += plane[yy * w + xx];
          }
          out[o] = static_cast<T>(s / static_cast<double>((y1 - y0) * (x1 - x0)));
        }
      }
    }
  }
  return record_op<T>(
      "adaptive_pool", {n, c, bins_h, bins_w}, std::move(out), {x},
      [=, arg = std::move(arg)](std::span<const T> gout, std::span<const std::span<T>> gi) {
        if (mode == PoolMode::Max) {
          for (std::size_t o = 0; o < gout.size(); ++o) gi[0][arg[o]] += gout[o];
          return;
        }
        for (std::int64_t p = 0; p < n * c; ++p) {
          T* gp = gi[0].data() + p * h * w;
          for (std::int64_t by = 0; by < bins_h; ++by) {
            auto [y0, y1] = adaptive_bin(by, h, bins_h);
            for (std::int64_t bx = 0; bx < bins_w; ++bx) {
              auto [x0, x1] = adaptive_bin(bx, w, bins_w);
              T share = gout[(p * bins_h + by) * bins_w + bx] / static_cast<T>((y1 - y0) * (x1 - x0));
              for (auto yy = y0; yy < y1; ++yy) {
                for (auto xx = x0; xx < x1; ++xx) gp[yy * w + xx] += share;
              }
            }
          }
        }
      });
}

/// Align-corners bilinear upsampling to out_h x out_w (never smaller than
/// the input). A 1 x 1 plane replicates.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require_4d(x.shape(), "bilinear_upsample");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h < h || out_w < w) {
    throw ShapeError("bilinear_upsample: target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " smaller than input " + shape_str(x.shape()));
  }
  std::vector<detail::Interp<T>> ry(static_cast<std::size_t>(out_h)), rx(static_cast<std::size_t>(out_w));
  for (std::int64_t y = 0; y < out_h; ++y) ry[y] = detail::align_corners<T>(y, h, out_h);
  for (std::int64_t xo = 0; xo < out_w; ++xo) rx[xo] = detail::align_corners<T>(xo, w, out_w);

  std::vector<T> out(static_cast<std::size_t>(n * c * out_h * out_w));
  const T* xd = x.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* src = xd + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::int64_t y = 0; y < out_h; ++y) {
      const auto& iy = ry[y];
      const T* r0 = src + iy.i0 * w;
      const T* r1 = src + iy.i1 * w;
      for (std::int64_t xo = 0; xo < out_w; ++xo) {
        const auto& ix = rx[xo];
        T top = (T(1) - ix.frac) * r0[ix.i0] + ix.frac * r0[ix.i1];
        T bot = (T(1) - ix.frac) * r1[ix.i0] + ix.frac * r1[ix.i1];
        dst[y * out_w + xo] = (T(1) - iy.frac) * top + iy.frac * bot;
      }
    }
  }
  return record_op<T>(
      "bilinear_upsample", {n, c, out_h, out_w}, std::move(out), {x},
      [=, ry = std::move(ry), rx = std::move(rx)](std::span<const T> gout,
                                                  std::span<const std::span<T>> gi) {
        for (std::int64_t p = 0; p < n * c; ++p) {
          T* gs = gi[0].data() + p * h * w;
          const T* go = gout.data() + p * out_h * out_w;
          for (std::int64_t y = 0; y < out_h; ++y) {
            const auto& iy = ry[y];
            for (std::int64_t xo = 0; xo < out_w; ++xo) {
              const auto& ix = rx[xo];
              T g = go[y * out_w + xo];
              T gt = (T(1) - iy.frac) * g;
              T gb = iy.frac * g;
              gs[iy.i0 * w + ix.i0] += (T(1) - ix.frac) * gt;
              gs[iy.i0 * w + ix.i1] += ix.frac * gt;
              gs[iy.i1 * w + ix.i0] += (T(1) - ix.frac) * gb;
              gs[iy.i1 * w + ix.i1] += ix.frac * gb;
            }
          }
        }
      });
}

/// Stacks inputs along the channel axis in argument order.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : xs) detail::require_4d(t.shape(), "concat_channels");
  const auto n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  std::int64_t ctot = 0;
  std::vector<std::int64_t> chans;
  for (const auto& t : xs) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: " + shape_str(t.shape()) + " does not match " +
                       shape_str(xs[0].shape()));
    }
    chans.push_back(t.dim(1));
    ctot += t.dim(1);
  }
  const auto hw = h * w;
  std::vector<T> out(static_cast<std::size_t>(n * ctot * hw));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      auto src = xs[k].data().subspan(static_cast<std::size_t>(i * chans[k] * hw),
                                      static_cast<std::size_t>(chans[k] * hw));
      std::copy(src.begin(), src.end(), out.begin() + (i * ctot + off) * hw);
      off += chans[k];
    }
  }
  return record_op<T>("concat_channels", {n, ctot, h, w}, std::move(out), xs,
                      [=](std::span<const T> gout, std::span<const std::span<T>> gi) {
                        for (std::int64_t i = 0; i < n; ++i) {
                          std::int64_t off = 0;
                          for (std::size_t k = 0; k < chans.size(); ++k) {
                            if (!gi[k].empty()) {
                              const T* src = gout.data() + (i * ctot + off) * hw;
                              T* dst = gi[k].data() + i * chans[k] * hw;
                              for (std::int64_t e = 0; e < chans[k] * hw; ++e) dst[e] += src[e];
                            }
                            off += chans[k];
                          }
                        }
                      });
}

/// Class-axis softmax of N x K x H x W logits (no gradient).
template <typename T>
std::vector<T> softmax_channels(std::span<const T> logits, std::int64_t n, std::int64_t k,
                                std::int64_t hw) {
  std::vector<T> prob(logits.size());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t p = 0; p < hw; ++p) {
      const T* l = logits.data() + i * k * hw + p;
      T* q = prob.data() + i * k * hw + p;
      T mx = l[0];
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, l[c * hw]);
      T z = 0;
      for (std::int64_t c = 0; c < k; ++c) {
        q[c * hw] = std::exp(l[c * hw] - mx);
        z += q[c * hw];
      }
      for (std::int64_t c = 0; c < k; ++c) q[c * hw] /= z;
    }
  }
  return prob;
}

/// Mean over non-ignored pixels of -log softmax(logits)[label]. With no valid
/// pixel the loss is 0 and so is every gradient.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                                std::int32_t ignore = kIgnoreLabel) {
  detail::require_4d(logits.shape(), "softmax_cross_entropy");
  const auto n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (labels.batch != n || labels.height != h || labels.width != w) {
    throw ShapeError("softmax_cross_entropy: labels " + std::to_string(labels.batch) + "x" +
                     std::to_string(labels.height) + "x" + std::to_string(labels.width) +
                     " do not match logits " + shape_str(logits.shape()));
  }
  validate_labels(labels, static_cast<std::int32_t>(k), ignore);
  const auto hw = h * w;
  auto prob = softmax_channels<T>(logits.data(), n, k, hw);
  double loss = 0.0;
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t p = 0; p < hw; ++p) {
      auto y = labels.data[static_cast<std::size_t>(i * hw + p)];
      if (y == ignore) continue;
      ++valid;
      // log-softmax from the stabilized logits keeps precision for confident pixels
      const T* l = logits.data().data() + i * k * hw + p;
      T mx = l[0];
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, l[c * hw]);
      double z = 0.0;
      for (std::int64_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(l[c * hw] - mx));
      loss += std::log(z) - static_cast<double>(l[y * hw] - mx);
    }
  }
  T value = valid ? static_cast<T>(loss / static_cast<double>(valid)) : T(0);
  auto lab = labels.data;
  return record_op<T>(
      "softmax_cross_entropy", {}, {value}, {logits},
      [=, prob = std::move(prob), lab = std::move(lab)](std::span<const T> g,
                                                        std::span<const std::span<T>> gi) {
        if (valid == 0) return;
        T s = g[0] / static_cast<T>(valid);
        for (std::int64_t i = 0; i < n; ++i) {
          for (std::int64_t p = 0; p < hw; ++p) {
            auto y = lab[static_cast<std::size_t>(i * hw + p)];
            if (y == ignore) continue;
            for (std::int64_t c = 0; c < k; ++c) {
              auto idx = i * k * hw + c * hw + p;
              gi[0][idx] += s * (prob[idx] - (c == y ? T(1) : T(0)));
            }
          }
        }
      });
}

/// Per-pixel argmax over classes; ties resolve to the lowest class index.
template <typename T>
LabelMap argmax_channels(std::span<const T> scores, std::int64_t n, std::int64_t k, std::int64_t h,
                         std::int64_t w) {
  LabelMap out(n, h, w);
  const auto hw = h * w;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t p = 0; p < hw; ++p) {
      const T* s = scores.data() + i * k * hw + p;
      std::int32_t best = 0;
      for (std::int64_t c = 1; c < k; ++c) {
        if (s[c * hw] > s[best * hw]) best = static_cast<std::int32_t>(c);
      }
      out.data[static_cast<std::size_t>(i * hw + p)] = best;
    }
  }
  return out;
}

}  // namespace psp
