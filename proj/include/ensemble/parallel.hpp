// Thread-count control and a deterministic parallel loop.

#ifndef ENSEMBLE_PARALLEL_HPP
#define ENSEMBLE_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace ensemble {

/// Caps worker threads; values < 1 restore the default.
void set_thread_limit(int threads);
int thread_limit();

/// Reads ENSEMBLECTL_THREADS (if set) and applies it.
void apply_thread_env();

/// Runs body(i) for i in [0, count). Each index must touch disjoint output;
/// callers reduce results in index order afterwards.
void parallel_for(std::ptrdiff_t count, const std::function<void(std::ptrdiff_t)>& body);

}  // namespace ensemble

#endif  // ENSEMBLE_PARALLEL_HPP
