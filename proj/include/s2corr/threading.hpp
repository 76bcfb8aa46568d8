#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace s2corr {

// Static block partition of [0, n) across up to `threads` workers. Each index
// is visited exactly once; callers keep determinism by writing to disjoint
// slots and reducing in index order afterwards.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(threads));
  const int per = (n + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    const int lo = w * per, hi = std::min(n, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace s2corr
