#pragma once

// Deterministic fork-join helper. Work items are partitioned into contiguous
// ranges by index, so any reduction that combines per-range partials in range
// order is bit-reproducible for a fixed worker count. ADPS_NUM_THREADS caps
// the worker pool.

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace adps {

inline int max_workers() {
  static const int cap = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("ADPS_NUM_THREADS")) {
      const int req = std::atoi(env);
      if (req >= 1) hw = std::min(hw, req);
    }
    return hw;
  }();
  return cap;
}

// fn(begin, end, worker) over [0, count), ranges assigned by worker index.
inline void parallel_ranges(std::size_t count,
                            const std::function<void(std::size_t, std::size_t, int)>& fn) {
  const int workers = std::min<std::size_t>(max_workers(), std::max<std::size_t>(count, 1));
  if (count == 0) return;
  if (workers <= 1) {
    fn(0, count, 0);
    return;
  }
  const std::size_t chunk = (count + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    const std::size_t begin = std::min(count, t * chunk);
    const std::size_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end, t] { fn(begin, end, t); });
  }
  for (auto& th : pool) th.join();
}

inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  parallel_ranges(count, [&](std::size_t b, std::size_t e, int) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace adps
