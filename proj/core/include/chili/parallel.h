#ifndef CHILI_PARALLEL_H_
#define CHILI_PARALLEL_H_

#include <cstddef>
#include <functional>

namespace chili {

// Worker cap from CHILI_WORKERS (unset or invalid: hardware concurrency).
std::size_t WorkerCount();

// Runs body(i) for i in [0, n) on up to WorkerCount() threads. Callers write
// results into pre-sized slots and reduce afterwards in index order, which
// keeps outputs independent of the worker count. The first exception thrown
// by any body is rethrown on the calling thread.
void ParallelFor(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace chili

#endif  // CHILI_PARALLEL_H_
