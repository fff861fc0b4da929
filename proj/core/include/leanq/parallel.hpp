#pragma once

#include <cstddef>
#include <functional>

namespace leanq {

// Worker count used when callers pass 0: hardware concurrency, capped by the
// LEANQ_THREADS environment variable when it holds a positive integer.
unsigned default_workers();

// Resolves 0 to default_workers(). Explicit requests are also capped by
// LEANQ_THREADS. Never returns 0.
unsigned resolve_workers(unsigned requested);

// Runs fn(i) for every i in [0, n). Indices are split into contiguous,
// equally sized chunks, one per worker. The first exception (by chunk order)
// is rethrown on the calling thread after all workers have joined.
void parallel_for(std::size_t n, unsigned workers,
                  const std::function<void(std::size_t)>& fn);

}  // namespace leanq
