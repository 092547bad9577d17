#pragma once

#include <cstddef>
#include <vector>

#include "gsop/detail/gemm.hpp"
#include "gsop/ops.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

namespace detail {

// Per batch item: M is [rows x cols]. Centers each row (row_center) or each
// column, then returns (1/len) * Mc Mc^T over rows or (1/len) * Mc^T Mc over
// columns. Backward: with S = G + G^T, dM = (1/len) S Mc (or Mc S); the
// centering projection leaves that term unchanged because Mc's centered axis
// already sums to zero.
template <class T>
Tensor<T> centered_gram(const Tensor<T>& x, bool channel_wise) {
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const std::size_t d = channel_wise ? C : P;
  const std::size_t len = channel_wise ? P : C;  // samples averaged over
  std::vector<T> centered(x.numel());
  std::vector<T> out(N * d * d, T(0));
  const T inv = T(1) / static_cast<T>(len);

  for (std::size_t n = 0; n < N; ++n) {
    const T* m = x.data().data() + n * C * P;
    T* mc = centered.data() + n * C * P;
    if (channel_wise) {
      for (std::size_t c = 0; c < C; ++c) {
        T acc = T(0);
        for (std::size_t p = 0; p < P; ++p) acc += m[c * P + p];
        const T mu = acc * T(1) / static_cast<T>(P);
        for (std::size_t p = 0; p < P; ++p) mc[c * P + p] = m[c * P + p] - mu;
      }
    } else {
      std::vector<T> mu(P, T(0));
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) mu[p] += m[c * P + p];
      for (auto& v : mu) v /= static_cast<T>(C);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) mc[c * P + p] = m[c * P + p] - mu[p];
    }
    T* o = out.data() + n * d * d;
    if (channel_wise)
      gemm_nt(C, C, P, mc, P, mc, P, o, C);  // Mc Mc^T
    else
      gemm_tn(P, P, C, mc, P, mc, P, o, P);  // Mc^T Mc
    for (std::size_t i = 0; i < d * d; ++i) o[i] *= inv;
    // Exact symmetry: the two triangles come from different summation orders.
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) o[j * d + i] = o[i * d + j];
  }

  return make_result<T>(Shape{N, d, d}, std::move(out), {&x},
                        [centered = std::move(centered), N, C, P, d, inv, channel_wise](Node<T>& node) {
                          T* gx = input_grad(node, 0);
                          if (!gx) return;
                          std::vector<T> sym(d * d);
                          for (std::size_t n = 0; n < N; ++n) {
                            const T* g = node.grad.data() + n * d * d;
                            for (std::size_t i = 0; i < d; ++i)
                              for (std::size_t j = 0; j < d; ++j) sym[i * d + j] = (g[i * d + j] + g[j * d + i]) * inv;
                            const T* mc = centered.data() + n * C * P;
                            T* gm = gx + n * C * P;
                            if (channel_wise)
                              gemm_nn(C, P, C, sym.data(), C, mc, P, gm, P);  // S Mc
                            else
                              gemm_nn(C, P, P, mc, P, sym.data(), P, gm, P);  // Mc S
                          }
                        });
}

}  // namespace detail

/// Channel-wise covariance: for each item, the c x c covariance of channel
/// vectors over the H*W positions, normalized by 1/(H*W), means removed.
template <class T>
Tensor<T> channel_covariance(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("channel_covariance expects [N, C, H, W], got " + to_string(x.shape()));
  if (x.dim(2) * x.dim(3) < 2)
    throw DegenerateInputError("channel_covariance needs at least 2 positions, got " + to_string(x.shape()));
  return detail::centered_gram(x, true);
}

/// Position-wise covariance: for each item, the hw x hw covariance of the
/// per-position feature vectors over the C channels, normalized by 1/C.
template <class T>
Tensor<T> position_covariance(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("position_covariance expects [N, C, H, W], got " + to_string(x.shape()));
  if (x.dim(1) < 2)
    throw DegenerateInputError("position_covariance needs at least 2 channels, got " + to_string(x.shape()));
  return detail::centered_gram(x, false);
}

}  // namespace gsop
