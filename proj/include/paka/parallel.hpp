#pragma once

#include <cstddef>
#include <functional>

namespace paka {

// Worker cap: PAKA_THREADS when set to a positive integer, else the hardware concurrency.
int worker_count();

// Runs fn(0..n-1) on up to worker_count() threads. Tasks must be independent; the first
// exception thrown by any task is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace paka
