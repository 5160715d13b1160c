#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace arbor {

// Number of threads to use: the OpenMP default, capped by ARBOR_THREADS.
int thread_limit();

// Index-parallel loop. f(i) runs once per index; results must be written to
// per-index slots so the schedule cannot change the outcome.
template <class F>
void parallel_for(std::ptrdiff_t n, F&& f) {
#ifdef _OPENMP
  const int nt = thread_limit();
  if (nt > 1 && n > 1) {
    std::atomic<bool> failed{false};
    std::exception_ptr err;
#pragma omp parallel for schedule(static) num_threads(nt)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      if (failed.load(std::memory_order_relaxed)) continue;
      try {
        f(i);
      } catch (...) {
#pragma omp critical(arbor_parallel_for_err)
        {
          if (!failed.exchange(true)) err = std::current_exception();
        }
      }
    }
    if (err) std::rethrow_exception(err);
    return;
  }
#endif
  for (std::ptrdiff_t i = 0; i < n; ++i) f(i);
}

inline constexpr std::size_t kReduceChunk = 1024;

// Deterministic parallel reduction: rows are folded serially inside
// fixed-size chunks and chunk accumulators are merged in ascending order,
// so the result does not depend on the thread count.
template <class Acc, class Fold, class Merge>
Acc chunked_reduce(std::size_t n, const Acc& zero, Fold fold, Merge merge,
                   std::size_t chunk = kReduceChunk) {
  if (n == 0) return zero;
  const std::size_t nchunks = (n + chunk - 1) / chunk;
  std::vector<Acc> acc(nchunks, zero);
  parallel_for(static_cast<std::ptrdiff_t>(nchunks), [&](std::ptrdiff_t c) {
    const std::size_t lo = static_cast<std::size_t>(c) * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    for (std::size_t i = lo; i < hi; ++i) fold(acc[c], i);
  });
  Acc total = zero;
  for (std::size_t c = 0; c < nchunks; ++c) merge(total, acc[c]);
  return total;
}

}  // namespace arbor
