#pragma once

#include <cstdint>
#include <functional>

namespace advectant {

/// Worker count for internal kernels. Defaults to the hardware concurrency,
/// capped by the ADVECTANT_THREADS environment variable when it is set.
int KernelThreads();

/// Runs body(i) for i in [0, n). Iterations are split into contiguous chunks,
/// one per worker; body must not write to state shared across iterations.
void ParallelFor(int64_t n, const std::function<void(int64_t)>& body);

/// Keeps freed large blocks inside the heap instead of returning them to the
/// OS, so the per-step tensors of a training loop reuse warm pages. No-op
/// outside glibc. Call once, early, from executables.
void RetainHeapPages();

}  // namespace advectant
