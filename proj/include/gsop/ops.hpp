#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "gsop/detail/gemm.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

namespace detail {

// Gradient buffer of input i, or nullptr when that input needs none.
template <class T>
T* input_grad(Node<T>& out, std::size_t i) {
  auto& in = *out.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

template <class T>
const T* input_data(Node<T>& out, std::size_t i) {
  return out.inputs[i]->data.data();
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  auto sa = contiguous_strides(pa);
  auto sb = contiguous_strides(pb);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[i] = std::max(pa[i], pb[i]);
    bc.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    bc.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output in row-major order.
template <class Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t r = bc.out.size();
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  const std::size_t inner = bc.out[r - 1];
  const std::size_t ia_step = bc.stride_a[r - 1], ib_step = bc.stride_b[r - 1];
  const std::size_t outer = numel(bc.out) / std::max<std::size_t>(inner, 1);
  std::vector<std::size_t> idx(r, 0);
  std::size_t o = 0;
  for (std::size_t it = 0; it < outer; ++it) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d + 1 < r; ++d) {
      ia += idx[d] * bc.stride_a[d];
      ib += idx[d] * bc.stride_b[d];
    }
    for (std::size_t j = 0; j < inner; ++j, ++o) fn(o, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = r - 1; d-- > 0;) {
      if (++idx[d] < bc.out[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
      for (std::size_t k = 0; k < 2; ++k)
        if (T* g = detail::input_grad(n, k))
          for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    });
  }
  auto bc = detail::broadcast_shapes(a.shape(), b.shape());
  std::vector<T> out(numel(bc.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = pa[ia] + pb[ib]; });
  return make_result<T>(bc.out, std::move(out), {&a, &b}, [bc](Node<T>& n) {
    T* ga = detail::input_grad(n, 0);
    T* gb = detail::input_grad(n, 1);
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += n.grad[o];
      if (gb) gb[ib] += n.grad[o];
    });
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("sub: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (T* g = detail::input_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
  });
}

/// Elementwise product with broadcasting (used for channel and spatial scaling).
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto bc = detail::broadcast_shapes(a.shape(), b.shape());
  std::vector<T> out(numel(bc.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = pa[ia] * pb[ib]; });
  return make_result<T>(bc.out, std::move(out), {&a, &b}, [bc](Node<T>& n) {
    T* ga = detail::input_grad(n, 0);
    T* gb = detail::input_grad(n, 1);
    const T* xa = detail::input_data(n, 0);
    const T* xb = detail::input_data(n, 1);
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += n.grad[o] * xb[ib];
      if (gb) gb[ib] += n.grad[o] * xa[ia];
    });
  });
}

/// Elementwise maximum of equal shapes; ties send the gradient to the first operand.
template <class T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("maximum: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] >= b[i] ? a[i] : b[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& n) {
    T* ga = detail::input_grad(n, 0);
    T* gb = detail::input_grad(n, 1);
    const T* xa = detail::input_data(n, 0);
    const T* xb = detail::input_data(n, 1);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (xa[i] >= xb[i]) {
        if (ga) ga[i] += n.grad[i];
      } else if (gb) {
        gb[i] += n.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {&a}, [factor](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * factor;
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + offset;
  return make_result<T>(a.shape(), std::move(out), {&a}, [](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------- activations

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {&x}, [](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        if (n.data[i] > T(0)) g[i] += n.grad[i];
  });
}

/// x for x >= 0, slope * x otherwise.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= T(0) ? x[i] : slope * x[i];
  return make_result<T>(x.shape(), std::move(out), {&x}, [slope](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      const T* xin = detail::input_data(n, 0);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += xin[i] >= T(0) ? n.grad[i] : slope * n.grad[i];
    }
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Split by sign so exp never overflows.
    const T v = x[i];
    T s;
    if (v >= T(0)) {
      s = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T(1) + e);
    }
    // Saturated values are pulled back inside the open interval (0, 1).
    out[i] = std::clamp(s, std::numeric_limits<T>::min(), T(1) - std::numeric_limits<T>::epsilon() / T(2));
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * n.data[i] * (T(1) - n.data[i]);
  });
}

// ---------------------------------------------------------------- structure

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  return make_result<T>(std::move(shape), x.values(), {&x}, [](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

/// [N, ...] -> [N, prod(...)]
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
  return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

/// Concatenates two [N, C_i, H, W] tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t N = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<T> out(N * (ca + cb) * hw);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data().data() + n * ca * hw, ca * hw, out.data() + n * (ca + cb) * hw);
    std::copy_n(b.data().data() + n * cb * hw, cb * hw, out.data() + n * (ca + cb) * hw + ca * hw);
  }
  return make_result<T>(Shape{N, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {&a, &b},
                        [N, ca, cb, hw](Node<T>& node) {
                          T* ga = detail::input_grad(node, 0);
                          T* gb = detail::input_grad(node, 1);
                          for (std::size_t n = 0; n < N; ++n) {
                            const T* g = node.grad.data() + n * (ca + cb) * hw;
                            if (ga)
                              for (std::size_t i = 0; i < ca * hw; ++i) ga[n * ca * hw + i] += g[i];
                            if (gb)
                              for (std::size_t i = 0; i < cb * hw; ++i) gb[n * cb * hw + i] += g[ca * hw + i];
                          }
                        });
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return make_result<T>(Shape{}, {acc}, {&x}, [](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      const std::size_t len = n.inputs[0]->data.size();
      for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum of x ⊙ w for a constant weight tensor w of the same shape.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> w) {
  if (w.size() != x.numel()) throw DimensionError("weighted_sum: weight length mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) acc += x[i] * w[i];
  std::vector<T> weights(w.begin(), w.end());
  return make_result<T>(Shape{}, {acc}, {&x}, [weights = std::move(weights)](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < weights.size(); ++i) g[i] += n.grad[0] * weights[i];
  });
}

// ---------------------------------------------------------------- linear algebra

/// [M x K] x [K x N] -> [M x N]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(M * N, T(0));
  detail::gemm_nn(M, N, K, a.data().data(), K, b.data().data(), N, out.data(), N);
  return make_result<T>(Shape{M, N}, std::move(out), {&a, &b}, [M, K, N](Node<T>& n) {
    if (T* ga = detail::input_grad(n, 0))  // dA = dC B^T
      detail::gemm_nt(M, K, N, n.grad.data(), N, detail::input_data(n, 1), N, ga, K);
    if (T* gb = detail::input_grad(n, 1))  // dB = A^T dC
      detail::gemm_tn(K, N, M, detail::input_data(n, 0), K, n.grad.data(), N, gb, N);
  });
}

/// Fully connected layer: x [N x in], weight [out x in], optional bias [out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1))
    throw DimensionError("linear: input " + to_string(x.shape()) + " weight " + to_string(weight.shape()));
  const std::size_t N = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  std::vector<T> out(N * out_f, T(0));
  if (bias)
    for (std::size_t i = 0; i < N; ++i) std::copy_n(bias->data().data(), out_f, out.data() + i * out_f);
  detail::gemm_nt(N, out_f, in, x.data().data(), in, weight.data().data(), in, out.data(), out_f);
  const bool has_bias = bias != nullptr;
  auto bw = [N, in, out_f, has_bias](Node<T>& n) {
    if (T* gx = detail::input_grad(n, 0))
      detail::gemm_nn(N, in, out_f, n.grad.data(), out_f, detail::input_data(n, 1), in, gx, in);
    if (T* gw = detail::input_grad(n, 1))
      detail::gemm_tn(out_f, in, N, n.grad.data(), out_f, detail::input_data(n, 0), in, gw, in);
    if (has_bias)
      if (T* gb = detail::input_grad(n, 2))
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < out_f; ++j) gb[j] += n.grad[i * out_f + j];
  };
  if (bias) return make_result<T>(Shape{N, out_f}, std::move(out), {&x, &weight, bias}, bw);
  return make_result<T>(Shape{N, out_f}, std::move(out), {&x, &weight}, bw);
}

// ---------------------------------------------------------------- regularization & loss

/// Inverted dropout; identity in eval mode or when p == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng, Mode mode) {
  if (mode == Mode::eval || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const T inv = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? inv : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return make_result<T>(x.shape(), std::move(out), {&x}, [mask = std::move(mask)](Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += n.grad[i] * mask[i];
  });
}

/// Mean softmax cross-entropy of logits [N x K] against integer labels.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("softmax_cross_entropy: logits " + to_string(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> probs(N * K);
  T loss = T(0);
  for (std::size_t i = 0; i < N; ++i) {
    const T* z = logits.data().data() + i * K;
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= K) throw DimensionError("label " + std::to_string(labels[i]) + " out of range");
    T zmax = z[0];
    for (std::size_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
    T denom = T(0);
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(z[k] - zmax);
    const T log_denom = std::log(denom);
    for (std::size_t k = 0; k < K; ++k) probs[i * K + k] = std::exp(z[k] - zmax - log_denom);
    loss -= z[y] - zmax - log_denom;
  }
  loss /= static_cast<T>(N);
  std::vector<std::int32_t> y(labels.begin(), labels.end());
  return make_result<T>(Shape{}, {loss}, {&logits},
                        [probs = std::move(probs), y = std::move(y), N, K](Node<T>& n) {
                          if (T* g = detail::input_grad(n, 0)) {
                            const T s = n.grad[0] / static_cast<T>(N);
                            for (std::size_t i = 0; i < N; ++i)
                              for (std::size_t k = 0; k < K; ++k) {
                                const T target = static_cast<std::size_t>(y[i]) == k ? T(1) : T(0);
                                g[i * K + k] += s * (probs[i * K + k] - target);
                              }
                          }
                        });
}

}  // namespace gsop
