#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace sdtseg {

// Worker cap from SDTSEG_THREADS (0 or unset = hardware default).
inline int thread_count() {
  static const int cached = [] {
    int n = 0;
    if (const char* env = std::getenv("SDTSEG_THREADS")) n = std::atoi(env);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    return std::max(1, n);
  }();
  return cached;
}

// Runs fn(begin, end) over disjoint chunks of [0, n). Callers must only
// write to disjoint output ranges so the result is schedule-independent.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  if (n <= 0) return;
  const int workers = static_cast<int>(std::min<std::int64_t>(thread_count(), n));
  if (workers <= 1) {
    fn(std::int64_t{0}, n);
    return;
  }
  const std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace sdtseg
