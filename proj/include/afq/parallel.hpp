#pragma once

#include <cstddef>
#include <functional>

namespace afq {

/// Worker count: AFQ_THREADS if set and positive, else hardware concurrency (at least 1).
std::size_t worker_threads();

/// Runs body(i) for i in [0, count) across up to worker_threads() threads.
/// Callers write results into per-index slots and reduce afterwards in index order.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace afq
