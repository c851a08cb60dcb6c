#pragma once

#include <cstddef>
#include <functional>

namespace bae {

/// Worker count for parallel_for. 0 restores the default (BAE_THREADS if
/// set, else hardware concurrency).
void set_thread_count(std::size_t n);
std::size_t thread_count();

/// Calls fn(i) for i in [0, n). Each index runs exactly once; callers write
/// only to slot i, so results do not depend on the thread count. The first
/// exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace bae
