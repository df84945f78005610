#pragma once

#include <cstddef>
#include <functional>

namespace bifrec {

// Worker cap from BFRC_THREADS; defaults to 1 so runs stay deterministic
// unless the user opts in.
std::size_t worker_thread_count();

// Runs fn(0..n-1), chunked across worker_thread_count() threads. Each index
// must write only to its own slots; results are identical at any thread
// count. Exceptions propagate to the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace bifrec
