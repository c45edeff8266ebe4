#include "advectant/parallel.h"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace advectant {

int KernelThreads() {
  static const int threads = [] {
    int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("ADVECTANT_THREADS")) {
      try {
        const int cap = std::stoi(env);
        if (cap > 0) n = std::min(n, cap);
      } catch (const std::exception&) {
        // Unparseable values leave the default in place.
      }
    }
    return n;
  }();
  return threads;
}

void ParallelFor(int64_t n, const std::function<void(int64_t)>& body) {
  const int64_t workers = std::min<int64_t>(KernelThreads(), n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const int64_t chunk = (n + workers - 1) / workers;
  for (int64_t w = 0; w < workers; ++w) {
    const int64_t begin = w * chunk;
    const int64_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] {
      for (int64_t i = begin; i < end; ++i) body(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

void RetainHeapPages() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace advectant
