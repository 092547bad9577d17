#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "gsop/ops.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

namespace detail {

inline void require_nchw(const Shape& s, const char* op) {
  if (s.size() != 4) throw DimensionError(std::string(op) + " expects [N, C, H, W], got " + to_string(s));
}

struct Bin {
  std::size_t begin, end;
};

// Near-equal contiguous bins: [floor(i*in/out), ceil((i+1)*in/out)).
inline std::vector<Bin> adaptive_bins(std::size_t in, std::size_t out) {
  std::vector<Bin> bins(out);
  for (std::size_t i = 0; i < out; ++i) {
    bins[i].begin = (i * in) / out;
    bins[i].end = ((i + 1) * in + out - 1) / out;
  }
  return bins;
}

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-center sampling positions, clamped at the borders.
inline std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// [N, C, H, W] -> [N, C, 1, 1] arithmetic mean over positions.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_nchw(x.shape(), "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  std::vector<T> out(N * C);
  for (std::size_t i = 0; i < N * C; ++i) {
    const T* p = x.data().data() + i * S;
    T acc = T(0);
    for (std::size_t s = 0; s < S; ++s) acc += p[s];
    out[i] = acc / static_cast<T>(S);
  }
  return make_result<T>(Shape{N, C, 1, 1}, std::move(out), {&x}, [N, C, S](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < N * C; ++i) {
        const T v = n.grad[i] / static_cast<T>(S);
        for (std::size_t s = 0; s < S; ++s) g[i * S + s] += v;
      }
    }
  });
}

/// Max pooling with implicit -inf padding; the gradient goes to the first maximal tap.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  detail::require_nchw(x.shape(), "max_pool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H + 2 * pad < kernel || W + 2 * pad < kernel) throw DimensionError("max_pool2d: kernel larger than input");
  const std::size_t Ho = (H + 2 * pad - kernel) / stride + 1, Wo = (W + 2 * pad - kernel) / stride + 1;
  std::vector<T> out(N * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* p = x.data().data() + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t i = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
            if (p[i] > best) {
              best = p[i];
              best_i = i;
            }
          }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = best;
        argmax[o] = nc * H * W + best_i;
      }
  }
  return make_result<T>(Shape{N, C, Ho, Wo}, std::move(out), {&x}, [argmax = std::move(argmax)](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += n.grad[o];
  });
}

/// Averages near-equal contiguous bins down to out_h x out_w.
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_nchw(x.shape(), "adaptive_avg_pool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == 0 || out_w == 0 || out_h > H || out_w > W)
    throw DimensionError("adaptive_avg_pool2d: cannot pool " + to_string(x.shape()) + " to " + std::to_string(out_h) +
                         "x" + std::to_string(out_w));
  auto by = detail::adaptive_bins(H, out_h);
  auto bx = detail::adaptive_bins(W, out_w);
  std::vector<T> out(N * C * out_h * out_w);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* p = x.data().data() + nc * H * W;
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        T acc = T(0);
        for (std::size_t y = by[oy].begin; y < by[oy].end; ++y)
          for (std::size_t xx = bx[ox].begin; xx < bx[ox].end; ++xx) acc += p[y * W + xx];
        const auto count = static_cast<T>((by[oy].end - by[oy].begin) * (bx[ox].end - bx[ox].begin));
        out[(nc * out_h + oy) * out_w + ox] = acc / count;
      }
  }
  return make_result<T>(Shape{N, C, out_h, out_w}, std::move(out), {&x},
                        [by = std::move(by), bx = std::move(bx), N, C, H, W, out_h, out_w](Node<T>& n) {
                          T* g = detail::input_grad(n, 0);
                          if (!g) return;
                          for (std::size_t nc = 0; nc < N * C; ++nc)
                            for (std::size_t oy = 0; oy < out_h; ++oy)
                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                const auto count =
                                    static_cast<T>((by[oy].end - by[oy].begin) * (bx[ox].end - bx[ox].begin));
                                const T v = n.grad[(nc * out_h + oy) * out_w + ox] / count;
                                for (std::size_t y = by[oy].begin; y < by[oy].end; ++y)
                                  for (std::size_t xx = bx[ox].begin; xx < bx[ox].end; ++xx) g[nc * H * W + y * W + xx] += v;
                              }
                        });
}

/// Bilinear resampling with half-pixel centers (corners not aligned).
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_nchw(x.shape(), "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: output size must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == out_h && W == out_w) return reshape(x, x.shape());
  auto ty = detail::bilinear_taps(H, out_h);
  auto tx = detail::bilinear_taps(W, out_w);
  std::vector<T> out(N * C * out_h * out_w);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* p = x.data().data() + nc * H * W;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      const T fy = static_cast<T>(a.frac);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const T fx = static_cast<T>(b.frac);
        const T top = p[a.lo * W + b.lo] * (T(1) - fx) + p[a.lo * W + b.hi] * fx;
        const T bottom = p[a.hi * W + b.lo] * (T(1) - fx) + p[a.hi * W + b.hi] * fx;
        out[(nc * out_h + oy) * out_w + ox] = top * (T(1) - fy) + bottom * fy;
      }
    }
  }
  return make_result<T>(Shape{N, C, out_h, out_w}, std::move(out), {&x},
                        [ty = std::move(ty), tx = std::move(tx), N, C, H, W, out_h, out_w](Node<T>& n) {
                          T* g = detail::input_grad(n, 0);
                          if (!g) return;
                          for (std::size_t nc = 0; nc < N * C; ++nc) {
                            T* gp = g + nc * H * W;
                            for (std::size_t oy = 0; oy < out_h; ++oy) {
                              const auto& a = ty[oy];
                              const T fy = static_cast<T>(a.frac);
                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                const auto& b = tx[ox];
                                const T fx = static_cast<T>(b.frac);
                                const T v = n.grad[(nc * out_h + oy) * out_w + ox];
                                gp[a.lo * W + b.lo] += v * (T(1) - fy) * (T(1) - fx);
                                gp[a.lo * W + b.hi] += v * (T(1) - fy) * fx;
                                gp[a.hi * W + b.lo] += v * fy * (T(1) - fx);
                                gp[a.hi * W + b.hi] += v * fy * fx;
                              }
                            }
                          }
                        });
}

}  // namespace gsop
