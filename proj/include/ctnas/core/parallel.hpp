#pragma once

// Kernel-level data parallelism. Each index is processed by exactly one
// worker and writes disjoint outputs, so results never depend on the thread
// count. CTNAS_THREADS caps the number of workers.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace ctnas {

inline int max_threads() {
  static const int cached = [] {
    int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("CTNAS_THREADS")) {
      try {
        int v = std::stoi(env);
        if (v >= 1) return std::min(v, hw);
      } catch (...) {
      }
    }
    return hw;
  }();
  return cached;
}

// Runs fn(i) for i in [0, n). `grain` is the minimum work per worker.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 1) {
  const int threads =
      static_cast<int>(std::min<std::int64_t>(max_threads(), std::max<std::int64_t>(1, n / grain)));
  if (threads <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads - 1));
  const std::int64_t chunk = (n + threads - 1) / threads;
  for (int t = 1; t < threads; ++t) {
    const std::int64_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::int64_t i = 0; i < std::min(n, chunk); ++i) fn(i);
  for (auto& th : pool) th.join();
}

}  // namespace ctnas
