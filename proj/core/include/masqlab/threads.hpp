#pragma once

#include <cstdint>
#include <functional>

namespace masqlab {

// Worker-pool size: min(MASQLAB_THREADS, hardware_concurrency), at least 1.
int worker_count();

// Runs fn(begin, end) over a partition of [0, n). Work items must write
// to disjoint outputs; chunk boundaries are fixed by (n, worker_count())
// so results never depend on scheduling. Falls back to a direct call when
// n is small or only one worker is available.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace masqlab
