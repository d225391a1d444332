#pragma once

#include <cstddef>
#include <functional>

namespace funavg {

/// Worker cap: FUNAVG_THREADS if set and positive, else hardware concurrency.
int max_threads();

/// Overrides the environment for this process (0 restores the default).
void set_max_threads(int threads);

/// Keeps large scratch buffers on the heap instead of fresh mmap/munmap
/// pairs per allocation (glibc only; no-op elsewhere).
void tune_allocator();

/// Runs body(i) for i in [0, n). Calls made from inside a worker run inline,
/// so nesting never oversubscribes. Callers write results into per-index
/// slots; the outcome never depends on scheduling. The first exception thrown
/// by any body is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace funavg
