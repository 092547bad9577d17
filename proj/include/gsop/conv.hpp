#pragma once

#include <cstddef>
#include <type_traits>
#include <vector>

#include "gsop/detail/gemm.hpp"
#include "gsop/ops.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::size_t groups = 1;
};

struct ConvGeometry {
  std::size_t N, Cin, H, W;
  std::size_t Cout, kh, kw;
  std::size_t Ho, Wo;
  std::size_t groups, cin_g, cout_g;
  std::size_t stride, pad_h, pad_w;

  std::size_t patch() const { return cin_g * kh * kw; }
  std::size_t positions() const { return Ho * Wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad_h == 0 && pad_w == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Conv2dOptions& opt) {
  if (x.size() != 4 || w.size() != 4)
    throw DimensionError("conv2d expects 4-d input and weight, got " + to_string(x) + " and " + to_string(w));
  if (opt.groups == 0 || opt.stride == 0) throw ConfigError("conv2d: groups and stride must be positive");
  ConvGeometry g{};
  g.N = x[0];
  g.Cin = x[1];
  g.H = x[2];
  g.W = x[3];
  g.Cout = w[0];
  g.kh = w[2];
  g.kw = w[3];
  g.groups = opt.groups;
  g.stride = opt.stride;
  g.pad_h = opt.pad_h;
  g.pad_w = opt.pad_w;
  if (g.Cin % g.groups != 0 || g.Cout % g.groups != 0)
    throw ConfigError("conv2d: channels " + std::to_string(g.Cin) + "->" + std::to_string(g.Cout) +
                      " not divisible by groups " + std::to_string(g.groups));
  g.cin_g = g.Cin / g.groups;
  g.cout_g = g.Cout / g.groups;
  if (w[1] != g.cin_g)
    throw DimensionError("conv2d: weight " + to_string(w) + " incompatible with input " + to_string(x) + " and " +
                         std::to_string(g.groups) + " groups");
  if (g.H + 2 * g.pad_h < g.kh || g.W + 2 * g.pad_w < g.kw)
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                         " larger than padded input " + to_string(x));
  g.Ho = (g.H + 2 * g.pad_h - g.kh) / g.stride + 1;
  g.Wo = (g.W + 2 * g.pad_w - g.kw) / g.stride + 1;
  return g;
}

namespace detail {

// Gathers one group's receptive fields into col [cin_g*kh*kw x Ho*Wo].
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const T* xc = x + c * g.H * g.W;
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad_h);
          T* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) {
            std::fill_n(dst, g.Wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.W;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.W)) ? T(0) : src[ix];
          }
        }
      }
  }
}

// Scatter-adds col back onto the input layout of one group.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    T* xc = x + c * g.H * g.W;
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) continue;
          T* dst = xc + static_cast<std::size_t>(iy) * g.W;
          const T* src = row + oy * g.Wo;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.W)) dst[ix] += src[ox];
          }
        }
      }
  }
}

}  // namespace detail

/// Grouped 2-d convolution: x [N, Cin, H, W], weight [Cout, Cin/G, kh, kw],
/// optional bias [Cout]. Each group convolves its own channel slice; the
/// reference path gathers patches and multiplies by the group's weight block.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                 const Conv2dOptions& opt = {}) {
  const ConvGeometry g = conv_geometry(x.shape(), weight.shape(), opt);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.Cout))
    throw DimensionError("conv2d: bias " + to_string(bias->shape()) + " for " + std::to_string(g.Cout) + " outputs");
  const std::size_t P = g.positions(), K = g.patch();
  std::vector<T> out(g.N * g.Cout * P, T(0));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias ? bias->data().data() : nullptr;

  auto job = [&](std::size_t idx) {
    const std::size_t n = idx / g.groups, grp = idx % g.groups;
    const T* xg = xd + (n * g.Cin + grp * g.cin_g) * g.H * g.W;
    T* og = out.data() + (n * g.Cout + grp * g.cout_g) * P;
    if (bd)
      for (std::size_t o = 0; o < g.cout_g; ++o) std::fill_n(og + o * P, P, bd[grp * g.cout_g + o]);
    const T* wg = wd + grp * g.cout_g * K;
    if (g.pointwise()) {
      detail::gemm_nn(g.cout_g, P, K, wg, K, xg, P, og, P);
    } else {
      std::vector<T> col(K * P);
      detail::im2col(xg, g, col.data());
      detail::gemm_nn(g.cout_g, P, K, wg, K, col.data(), P, og, P);
    }
  };
  parallel_for(g.N * g.groups, job);

  auto bw = [g, has_bias = bias != nullptr](Node<T>& node) {
    const std::size_t P = g.positions(), K = g.patch();
    const T* xd = detail::input_data(node, 0);
    const T* wd = detail::input_data(node, 1);
    T* gx = detail::input_grad(node, 0);
    T* gw = detail::input_grad(node, 1);
    T* gb = has_bias ? detail::input_grad(node, 2) : nullptr;
    const T* go = node.grad.data();

    if (gb)
      for (std::size_t n = 0; n < g.N; ++n)
        for (std::size_t o = 0; o < g.Cout; ++o) {
          const T* src = go + (n * g.Cout + o) * P;
          T acc = T(0);
          for (std::size_t p = 0; p < P; ++p) acc += src[p];
          gb[o] += acc;
        }
    // Weight gradient: per group, reduce over the batch in order.
    if (gw) {
      parallel_for(g.groups, [&](std::size_t grp) {
        std::vector<T> col(g.pointwise() ? 0 : K * P);
        T* wg = gw + grp * g.cout_g * K;
        for (std::size_t n = 0; n < g.N; ++n) {
          const T* xg = xd + (n * g.Cin + grp * g.cin_g) * g.H * g.W;
          const T* gog = go + (n * g.Cout + grp * g.cout_g) * P;
          const T* colp = xg;
          if (!g.pointwise()) {
            detail::im2col(xg, g, col.data());
            colp = col.data();
          }
          detail::gemm_nt(g.cout_g, K, P, gog, P, colp, P, wg, K);
        }
      });
    }
    if (gx) {
      parallel_for(g.N * g.groups, [&](std::size_t idx) {
        const std::size_t n = idx / g.groups, grp = idx % g.groups;
        const T* wg = wd + grp * g.cout_g * K;
        const T* gog = go + (n * g.Cout + grp * g.cout_g) * P;
        T* gxg = gx + (n * g.Cin + grp * g.cin_g) * g.H * g.W;
        if (g.pointwise()) {
          detail::gemm_tn(K, P, g.cout_g, wg, K, gog, P, gxg, P);
        } else {
          std::vector<T> col(K * P, T(0));
          detail::gemm_tn(K, P, g.cout_g, wg, K, gog, P, col.data(), P);
          detail::col2im(col.data(), g, gxg);
        }
      });
    }
  };
  Shape shape{g.N, g.Cout, g.Ho, g.Wo};
  if (bias) return make_result<T>(std::move(shape), std::move(out), {&x, &weight, bias}, bw);
  return make_result<T>(std::move(shape), std::move(out), {&x, &weight}, bw);
}

/// Direct nested-loop convolution (no bias). Accumulates in the same order as
/// the patch-gather path, so results match it bitwise.
template <class T>
std::vector<T> conv2d_direct(const Tensor<T>& x, const Tensor<T>& weight, const Conv2dOptions& opt = {}) {
  const ConvGeometry g = conv_geometry(x.shape(), weight.shape(), opt);
  std::vector<T> out(g.N * g.Cout * g.positions(), T(0));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (std::size_t n = 0; n < g.N; ++n)
    for (std::size_t grp = 0; grp < g.groups; ++grp)
      for (std::size_t o = 0; o < g.cout_g; ++o) {
        const std::size_t oc = grp * g.cout_g + o;
        T* dst = out.data() + (n * g.Cout + oc) * g.positions();
        for (std::size_t c = 0; c < g.cin_g; ++c)
          for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const T wv = wd[((oc * g.cin_g + c) * g.kh + ki) * g.kw + kj];
              if (wv == T(0)) continue;
              for (std::size_t oy = 0; oy < g.Ho; ++oy)
                for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                  const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad_h);
                  const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad_w);
                  const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.H) &&
                                      ix < static_cast<std::ptrdiff_t>(g.W);
                  const T xv = inside ? xd[((n * g.Cin + grp * g.cin_g + c) * g.H + static_cast<std::size_t>(iy)) * g.W +
                                           static_cast<std::size_t>(ix)]
                                      : T(0);
                  dst[oy * g.Wo + ox] += wv * xv;
                }
            }
      }
  return out;
}

}  // namespace gsop
