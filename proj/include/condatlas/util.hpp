#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <thread>
#include <vector>

namespace condatlas {

// splitmix64 finalizer; maps (seed, stream) to an independent RNG seed so
// per-step generators can be reconstructed after a resume.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream) {
  return std::mt19937_64(mix_seed(seed, stream));
}

// Process-wide worker budget for per-subject parallel loops. Training
// steps stay single-threaded regardless; only evaluation fan-out reads it.
inline int &worker_threads() {
  static int n = 1;
  return n;
}

// Runs fn(i) for i in [0, n). Work is split into contiguous blocks so the
// result set is identical for any thread count; only use where iterations
// write disjoint state.
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)> &fn) {
  if (threads <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i)
      fn(i);
    return;
  }
  const int nt = static_cast<int>(std::min<int64_t>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (int t = 0; t < nt; ++t) {
    const int64_t lo = n * t / nt, hi = n * (t + 1) / nt;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i)
        fn(i);
    });
  }
  for (auto &th : pool)
    th.join();
}

} // namespace condatlas
