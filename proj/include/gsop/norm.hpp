#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "gsop/ops.hpp"
#include "gsop/tensor.hpp"

namespace gsop {

/// Running statistics of one batch-norm layer. Fresh state is mean 0, var 1.
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

struct BatchNormOptions {
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double epsilon = 1e-5;
};

/// Per-channel normalization over every axis except axis 1. Train mode uses
/// biased batch statistics for the output and records the unbiased variance in
/// the running estimate; eval mode uses the running estimate.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                     Mode mode, const BatchNormOptions& opt = {}) {
  if (x.rank() < 2) throw DimensionError("batch_norm expects [N, C, ...], got " + to_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.numel() / (N * C);
  if (gamma.numel() != C || beta.numel() != C || state.running_mean.size() != C)
    throw DimensionError("batch_norm: " + std::to_string(C) + " channels but parameters sized " +
                         std::to_string(gamma.numel()));
  const T eps = static_cast<T>(opt.epsilon);
  const T* xd = x.data().data();
  const std::size_t M = N * S;

  std::vector<T> mu(C), inv_std(C);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) acc += p[s];
      }
      const T m = acc / static_cast<T>(M);
      T var = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) var += (p[s] - m) * (p[s] - m);
      }
      var /= static_cast<T>(M);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
      const T mom = static_cast<T>(opt.momentum);
      state.running_mean[c] = mom * state.running_mean[c] + (T(1) - mom) * m;
      state.running_var[c] = mom * state.running_var[c] + (T(1) - mom) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const T h = (xd[base + s] - mu[c]) * inv_std[c];
        xhat[base + s] = h;
        out[base + s] = gd[c] * h + bd[c];
      }
    }

  return make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, S, M,
                         train = mode == Mode::train](Node<T>& node) {
                          const T* go = node.grad.data();
                          const T* gd = detail::input_data(node, 1);
                          T* gx = detail::input_grad(node, 0);
                          T* gg = detail::input_grad(node, 1);
                          T* gb = detail::input_grad(node, 2);
                          for (std::size_t c = 0; c < C; ++c) {
                            T sum_g = T(0), sum_gh = T(0);
                            for (std::size_t n = 0; n < N; ++n) {
                              const std::size_t base = (n * C + c) * S;
                              for (std::size_t s = 0; s < S; ++s) {
                                sum_g += go[base + s];
                                sum_gh += go[base + s] * xhat[base + s];
                              }
                            }
                            if (gg) gg[c] += sum_gh;
                            if (gb) gb[c] += sum_g;
                            if (!gx) continue;
                            const T k = gd[c] * inv_std[c];
                            const T mean_g = sum_g / static_cast<T>(M);
                            const T mean_gh = sum_gh / static_cast<T>(M);
                            for (std::size_t n = 0; n < N; ++n) {
                              const std::size_t base = (n * C + c) * S;
                              for (std::size_t s = 0; s < S; ++s) {
                                if (train)
                                  gx[base + s] += k * (go[base + s] - mean_g - xhat[base + s] * mean_gh);
                                else
                                  gx[base + s] += k * go[base + s];
                              }
                            }
                          }
                        });
}

}  // namespace gsop
