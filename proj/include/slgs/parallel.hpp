#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace slgs {

/// Worker count: SLGS_THREADS if set and positive, else hardware concurrency.
inline int thread_budget() {
  if (const char* env = std::getenv("SLGS_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) over a static partition. Callers must make
/// iterations independent; results are then identical for any thread count.
template <class Fn>
void parallel_for(int n, Fn&& fn, int threads = thread_budget()) {
  threads = std::clamp(threads, 1, std::max(1, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace slgs
