#pragma once

#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gsop {

/// Kernel thread cap: GSOP_THREADS if set and positive, otherwise hardware concurrency.
inline int kernel_threads() {
  static const int threads = [] {
    if (const char* env = std::getenv("GSOP_THREADS")) {
      try {
        int n = std::stoi(env);
        if (n > 0) return n;
      } catch (...) {
      }
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return threads;
}

/// Runs fn(i) for i in [0, n). Each index is handled by exactly one thread, so
/// kernels that write disjoint outputs per index stay bitwise deterministic
/// regardless of the thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
#ifdef _OPENMP
  const int threads = kernel_threads();
  if (threads > 1 && n > 1) {
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(static) num_threads(threads)
    for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

}  // namespace gsop
