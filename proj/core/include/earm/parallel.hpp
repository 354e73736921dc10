#pragma once

#include <functional>
#include <thread>
#include <vector>

#include "earm/grad.hpp"

namespace earm {

inline int default_thread_count() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

/// Static block partition of [0, n) over `threads` workers. Each worker
/// runs fn(worker, begin, end); worker 0 runs on the calling thread.
/// Partition and merge order are fixed, so results are reproducible for a
/// given thread count.
inline void parallel_chunks(std::size_t n, int threads,
                            const std::function<void(int, std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  if (threads < 1) threads = 1;
  const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  if (t == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(t - 1);
  const std::size_t chunk = (n + t - 1) / t;
  for (std::size_t w = 1; w < t; ++w) {
    const std::size_t b = std::min(n, w * chunk);
    const std::size_t e = std::min(n, (w + 1) * chunk);
    if (b < e) pool.emplace_back(fn, static_cast<int>(w), b, e);
  }
  fn(0, 0, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

/// Per-worker GradVector sinks over a static partition of [0, n), merged
/// into `out` in worker order (deterministic reduction).
inline void parallel_grad_accumulate(
    std::size_t n, int threads, GradVector& out,
    const std::function<void(int, std::size_t, std::size_t, GradVector&)>& fn) {
  if (n == 0) return;
  if (threads < 1) threads = 1;
  const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  if (t == 1) {
    fn(0, 0, n, out);
    return;
  }
  std::vector<GradVector> sinks(t, GradVector(out.size()));
  parallel_chunks(n, static_cast<int>(t),
                  [&](int w, std::size_t b, std::size_t e) { fn(w, b, e, sinks[w]); });
  for (std::size_t w = 0; w < t; ++w) out += sinks[w];
}

}  // namespace earm
