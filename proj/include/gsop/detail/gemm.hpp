#pragma once

#include <cstddef>

#include "gsop/parallel.hpp"

// Row-major dense kernels on raw buffers. All accumulate into C (C += ...).
// Each output row is owned by one thread and reduced in a fixed order.
namespace gsop::detail {

// C[M x N] += A[M x K] * B[K x N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb,
             T* C, std::size_t ldc) {
  auto row = [&](std::size_t i) {
    T* c = C + i * ldc;
    const T* a = A + i * lda;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + k * ldb;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  };
  if (M * N * K > (1u << 16))
    parallel_for(M, row);
  else
    for (std::size_t i = 0; i < M; ++i) row(i);
}

// C[M x N] += A[M x K] * B^T, B stored as [N x K]
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb,
             T* C, std::size_t ldc) {
  auto row = [&](std::size_t i) {
    const T* a = A + i * lda;
    T* c = C + i * ldc;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * ldb;
      T acc = T(0);
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  };
  if (M * N * K > (1u << 16))
    parallel_for(M, row);
  else
    for (std::size_t i = 0; i < M; ++i) row(i);
}

// C[M x N] += A^T * B, A stored as [K x M], B as [K x N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb,
             T* C, std::size_t ldc) {
  auto row = [&](std::size_t i) {
    T* c = C + i * ldc;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[k * lda + i];
      if (av == T(0)) continue;
      const T* b = B + k * ldb;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  };
  if (M * N * K > (1u << 16))
    parallel_for(M, row);
  else
    for (std::size_t i = 0; i < M; ++i) row(i);
}

}  // namespace gsop::detail
