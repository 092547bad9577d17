#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "gsop/covariance.hpp"
#include "gsop/detail/gemm.hpp"
#include "gsop/module.hpp"

namespace gsop {

/// How the input is scaled before iterating; Newton-Schulz converges when the
/// scaled spectrum lies in (0, 1].
enum class PreNorm { trace, frobenius };

inline const char* to_string(PreNorm p) { return p == PreNorm::trace ? "trace" : "frobenius"; }

inline PreNorm parse_prenorm(const std::string& s) {
  if (s == "trace") return PreNorm::trace;
  if (s == "frobenius") return PreNorm::frobenius;
  throw ConfigError("unknown pre-normalization '" + s + "' (expected trace or frobenius)");
}

struct IsqrtConfig {
  std::size_t c_reduced = 256;
  std::size_t iterations = 5;
  double epsilon = 1e-10;  // scale floor below which the input counts as degenerate
  PreNorm prenorm = PreNorm::frobenius;
  bool sqrt2_offdiag = false;

  std::size_t representation_length() const { return c_reduced * (c_reduced + 1) / 2; }

  void validate() const {
    if (iterations < 1) throw ConfigError("iSQRT: iterations must be >= 1");
    if (c_reduced < 2) throw ConfigError("iSQRT: reduced channels must be >= 2");
  }
};

/// Number of inputs so far whose scale fell below the degenerate floor and
/// produced an all-zero square root.
inline std::atomic<std::size_t>& degenerate_sqrt_events() {
  static std::atomic<std::size_t> count{0};
  return count;
}

namespace detail {

template <class T>
void mat_mul(std::size_t d, const T* a, const T* b, T* c) {
  std::fill_n(c, d * d, T(0));
  gemm_nn(d, d, d, a, d, b, d, c, d);
}

// Y <- Y T / 2 and Z <- T Z / 2 with T = 3I - Z Y, starting from
// Y = A_hat, Z = I. Keeps every intermediate when `history` is non-null.
template <class T>
void coupled_iteration(std::size_t d, std::size_t iterations, std::vector<T>& y, std::vector<T>& z,
                       std::vector<std::vector<T>>* history) {
  std::vector<T> t(d * d), tmp(d * d);
  for (std::size_t k = 0; k < iterations; ++k) {
    if (history) {
      history->push_back(y);
      history->push_back(z);
    }
    mat_mul(d, z.data(), y.data(), t.data());
    for (std::size_t i = 0; i < d * d; ++i) t[i] = -t[i];
    for (std::size_t i = 0; i < d; ++i) t[i * d + i] += T(3);
    mat_mul(d, y.data(), t.data(), tmp.data());
    for (std::size_t i = 0; i < d * d; ++i) y[i] = T(0.5) * tmp[i];
    mat_mul(d, t.data(), z.data(), tmp.data());
    for (std::size_t i = 0; i < d * d; ++i) z[i] = T(0.5) * tmp[i];
  }
}

}  // namespace detail

/// Coupled Newton-Schulz iteration on the raw matrix, without scaling.
/// Only meaningful for inputs whose spectrum already lies in (0, 1].
template <class T>
std::vector<T> newton_schulz_core(std::span<const T> a, std::size_t d, std::size_t iterations) {
  std::vector<T> y(a.begin(), a.end()), z(d * d, T(0));
  for (std::size_t i = 0; i < d; ++i) z[i * d + i] = T(1);
  detail::coupled_iteration<T>(d, iterations, y, z, nullptr);
  return y;
}

/// Matrix square root of symmetric PSD input [d, d] or [N, d, d]:
/// A_hat = A / s with s = tr(A) or ||A||_F, K coupled iterations, then the
/// result is rescaled by sqrt(s). The backward pass runs the iteration's
/// recursion in reverse from the stored iterates.
template <class T>
Tensor<T> newton_schulz_sqrt(const Tensor<T>& a, std::size_t iterations, PreNorm prenorm = PreNorm::frobenius,
                             double epsilon = 1e-10) {
  if (iterations < 1) throw ConfigError("newton_schulz_sqrt: iterations must be >= 1");
  const bool batched = a.rank() == 3;
  if (!(a.rank() == 2 || batched) || a.dim(a.rank() - 1) != a.dim(a.rank() - 2))
    throw DimensionError("newton_schulz_sqrt expects square [d, d] or [N, d, d], got " + to_string(a.shape()));
  const std::size_t d = a.dim(a.rank() - 1);
  const std::size_t N = batched ? a.dim(0) : 1;
  const std::size_t dd = d * d;

  struct Saved {
    T scale = T(0);
    bool degenerate = false;
    std::vector<std::vector<T>> iterates;  // Y_0, Z_0, Y_1, Z_1, ...
    std::vector<T> y_final;
  };
  std::vector<Saved> saved(N);
  std::vector<T> out(N * dd, T(0));

  for (std::size_t n = 0; n < N; ++n) {
    const T* src = a.data().data() + n * dd;
    Saved& s = saved[n];
    T norm = T(0);
    if (prenorm == PreNorm::trace) {
      for (std::size_t i = 0; i < d; ++i) norm += src[i * d + i];
    } else {
      for (std::size_t i = 0; i < dd; ++i) norm += src[i] * src[i];
      norm = std::sqrt(norm);
    }
    s.scale = norm;
    if (!(norm >= static_cast<T>(epsilon))) {
      s.degenerate = true;
      degenerate_sqrt_events().fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    std::vector<T> y(dd), z(dd, T(0));
    for (std::size_t i = 0; i < dd; ++i) y[i] = src[i] / norm;
    for (std::size_t i = 0; i < d; ++i) z[i * d + i] = T(1);
    detail::coupled_iteration(d, iterations, y, z, &s.iterates);
    const T root = std::sqrt(norm);
    for (std::size_t i = 0; i < dd; ++i) out[n * dd + i] = root * y[i];
    s.y_final = std::move(y);
  }

  return make_result<T>(a.shape(), std::move(out), {&a},
                        [saved = std::move(saved), N, d, dd, iterations, prenorm](Node<T>& node) {
                          T* ga = detail::input_grad(node, 0);
                          if (!ga) return;
                          const T* ad = detail::input_data(node, 0);
                          std::vector<T> gy(dd), gz(dd), gt(dd), tk(dd), tmp(dd);
                          for (std::size_t n = 0; n < N; ++n) {
                            const Saved& s = saved[n];
                            if (s.degenerate) continue;
                            const T* g = node.grad.data() + n * dd;
                            const T root = std::sqrt(s.scale);
                            // Output = sqrt(s) * Y_K.
                            T g_scale = T(0);
                            for (std::size_t i = 0; i < dd; ++i) {
                              gy[i] = root * g[i];
                              g_scale += g[i] * s.y_final[i];
                            }
                            g_scale /= T(2) * root;
                            std::fill(gz.begin(), gz.end(), T(0));
                            for (std::size_t k = iterations; k-- > 0;) {
                              const std::vector<T>& yk = s.iterates[2 * k];
                              const std::vector<T>& zk = s.iterates[2 * k + 1];
                              // T_k = 3I - Z_k Y_k
                              detail::mat_mul(d, zk.data(), yk.data(), tk.data());
                              for (std::size_t i = 0; i < dd; ++i) tk[i] = -tk[i];
                              for (std::size_t i = 0; i < d; ++i) tk[i * d + i] += T(3);
                              // Y_{k+1} = Y_k T_k / 2 ; Z_{k+1} = T_k Z_k / 2
                              std::fill(gt.begin(), gt.end(), T(0));
                              detail::gemm_tn(d, d, d, yk.data(), d, gy.data(), d, gt.data(), d);  // Y^T gY
                              detail::gemm_nt(d, d, d, gz.data(), d, zk.data(), d, gt.data(), d);  // gZ Z^T
                              for (std::size_t i = 0; i < dd; ++i) gt[i] *= T(0.5);
                              std::vector<T> gy_prev(dd, T(0)), gz_prev(dd, T(0));
                              detail::gemm_nt(d, d, d, gy.data(), d, tk.data(), d, gy_prev.data(), d);  // gY T^T
                              detail::gemm_tn(d, d, d, tk.data(), d, gz.data(), d, gz_prev.data(), d);  // T^T gZ
                              for (std::size_t i = 0; i < dd; ++i) {
                                gy_prev[i] *= T(0.5);
                                gz_prev[i] *= T(0.5);
                              }
                              // T_k = 3I - Z_k Y_k
                              std::fill(tmp.begin(), tmp.end(), T(0));
                              detail::gemm_nt(d, d, d, gt.data(), d, yk.data(), d, tmp.data(), d);  // gT Y^T
                              for (std::size_t i = 0; i < dd; ++i) gz_prev[i] -= tmp[i];
                              std::fill(tmp.begin(), tmp.end(), T(0));
                              detail::gemm_tn(d, d, d, zk.data(), d, gt.data(), d, tmp.data(), d);  // Z^T gT
                              for (std::size_t i = 0; i < dd; ++i) gy_prev[i] -= tmp[i];
                              gy.swap(gy_prev);
                              gz.swap(gz_prev);
                            }
                            // gy now holds dL/dA_hat; A_hat = A / s.
                            const T* src = ad + n * dd;
                            T inner = T(0);
                            for (std::size_t i = 0; i < dd; ++i) inner += gy[i] * src[i];
                            const T g_norm = g_scale - inner / (s.scale * s.scale);
                            T* dst = ga + n * dd;
                            for (std::size_t i = 0; i < dd; ++i) dst[i] += gy[i] / s.scale;
                            if (prenorm == PreNorm::trace) {
                              for (std::size_t i = 0; i < d; ++i) dst[i * d + i] += g_norm;
                            } else {
                              for (std::size_t i = 0; i < dd; ++i) dst[i] += g_norm * src[i] / s.scale;
                            }
                          }
                        });
}

/// Row-major upper triangle including the diagonal: [N, d, d] -> [N, d(d+1)/2].
/// Off-diagonal entries optionally weighted by sqrt(2).
template <class T>
Tensor<T> upper_triangle(const Tensor<T>& m, bool sqrt2_offdiag = false) {
  if (m.rank() != 3 || m.dim(1) != m.dim(2))
    throw DimensionError("upper_triangle expects [N, d, d], got " + to_string(m.shape()));
  const std::size_t N = m.dim(0), d = m.dim(1), len = d * (d + 1) / 2;
  const T w = sqrt2_offdiag ? static_cast<T>(std::sqrt(2.0)) : T(1);
  std::vector<T> out(N * len);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i; j < d; ++j) out[n * len + k++] = m[(n * d + i) * d + j] * (i == j ? T(1) : w);
  }
  return make_result<T>(Shape{N, len}, std::move(out), {&m}, [N, d, len, w](Node<T>& node) {
    T* g = detail::input_grad(node, 0);
    if (!g) return;
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t k = 0;
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) g[(n * d + i) * d + j] += node.grad[n * len + k++] * (i == j ? T(1) : w);
    }
  });
}

/// Inverse of upper_triangle for symmetric matrices (no graph recorded).
template <class T>
std::vector<T> symmetric_from_upper(std::span<const T> packed, std::size_t d, bool sqrt2_offdiag = false) {
  if (packed.size() != d * (d + 1) / 2) throw DimensionError("symmetric_from_upper: packed length mismatch");
  const T w = sqrt2_offdiag ? static_cast<T>(std::sqrt(2.0)) : T(1);
  std::vector<T> m(d * d);
  std::size_t k = 0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      const T v = i == j ? packed[k] : packed[k] / w;
      m[i * d + j] = v;
      m[j * d + i] = v;
      ++k;
    }
  return m;
}

/// Covariance head: 1x1 reduction (+BN+ReLU), channel covariance, Newton-Schulz
/// square root, upper-triangle vectorization.
template <class T>
class IsqrtCovHead : public Module<T> {
 public:
  IsqrtCovHead(std::size_t c_in, const IsqrtConfig& cfg, std::mt19937_64& rng)
      : cfg_((cfg.validate(), cfg)), reduce_(c_in, cfg.c_reduced, 1, 1, Conv2dOptions{}, Activation::relu, rng) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> cov = channel_covariance(reduce_.forward(x, mode));
    return upper_triangle(newton_schulz_sqrt(cov, cfg_.iterations, cfg_.prenorm, cfg_.epsilon), cfg_.sqrt2_offdiag);
  }

  void collect(const std::string& prefix, Registry<T>& r) override { reduce_.collect(join_name(prefix, "reduce"), r); }

  const IsqrtConfig& config() const { return cfg_; }
  std::size_t output_dim() const { return cfg_.representation_length(); }

 private:
  IsqrtConfig cfg_;
  ConvBnAct<T> reduce_;
};

}  // namespace gsop
