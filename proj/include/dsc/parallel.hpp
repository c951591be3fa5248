// Static-partition parallel loop. Each index is processed by exactly one
// worker and per-index arithmetic never depends on the partition, so results
// are bit-identical for any thread count.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace dsc {

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> threads{1};
  return threads;
}
}  // namespace detail

inline void set_num_threads(unsigned n) { detail::thread_setting() = n == 0 ? 1 : n; }
inline unsigned num_threads() { return detail::thread_setting(); }

/// Runs fn(i) for i in [begin, end). `work_per_index` is a rough op count used
/// to stay serial when spawning threads would cost more than it saves.
template <typename F>
void parallel_for(std::size_t begin, std::size_t end, F&& fn, std::size_t work_per_index = 1) {
  const std::size_t count = end > begin ? end - begin : 0;
  const std::size_t threads = std::min<std::size_t>(num_threads(), count);
  if (threads <= 1 || count * work_per_index < (1u << 15)) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t lo = begin + t * chunk;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = begin; i < std::min(end, begin + chunk); ++i) fn(i);
}

}  // namespace dsc
