#pragma once

#include <cstdint>
#include <functional>

namespace macswin {

// Number of worker threads used by data-parallel loops. Resolved once from
// MACSWIN_THREADS (falls back to the hardware count, capped at 8).
int thread_count();

// Runs fn(begin, end) over [0, n) split into contiguous chunks, one per
// worker. Chunks are disjoint, so writers to disjoint ranges need no locks
// and results do not depend on the schedule. Runs inline when n < grain or
// a single thread is configured.
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace macswin
