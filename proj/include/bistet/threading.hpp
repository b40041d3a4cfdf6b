#pragma once

// Deterministic fan-out over independent items. Results land in per-index
// slots, so output is identical for any worker count. BISTET_THREADS caps
// the pool size.

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bistet {

inline size_t thread_count() {
  size_t hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* env = std::getenv("BISTET_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1 && static_cast<size_t>(v) < hw) return static_cast<size_t>(v);
    if (v >= 1) return static_cast<size_t>(v);
  }
  return hw;
}

// fn(i) must touch only state owned by item i. If items throw, the exception
// from the lowest failing index is rethrown, so failures are reproducible
// regardless of worker count.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  size_t workers = thread_count();
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (workers > n) workers = n;
  std::atomic<size_t> next{0};
  std::mutex error_mu;
  size_t error_index = n;
  std::exception_ptr error;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (i < error_index) {
            error_index = i;
            error = std::current_exception();
          }
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace bistet
