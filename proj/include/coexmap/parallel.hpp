#ifndef COEXMAP_PARALLEL_HPP
#define COEXMAP_PARALLEL_HPP

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "coexmap/types.hpp"

namespace coexmap {

// Worker cap: explicit set_thread_cap() wins, then COEXMAP_THREADS, then
// hardware concurrency. Workers always write disjoint output slices, so
// results do not depend on the schedule.
void set_thread_cap(int cap);
int thread_cap();

// Chunked parallel map over [0, n). fn is called with disjoint [begin, end)
// ranges. Exceptions from workers are rethrown on the caller thread.
void parallel_for(Index n, const std::function<void(Index, Index)>& fn);

} // namespace coexmap

#endif
