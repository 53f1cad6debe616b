#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace axial {

// Process-wide worker count for parallel_for. Defaults to 1 so every run is
// sequential unless a caller opts in.
int thread_count();
void set_thread_count(int n);

// Splits [0, n) into at most thread_count() contiguous chunks and runs fn on
// each. Callers must only write to outputs indexed by their own range; under
// that contract results are bit-identical for every thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const int threads = thread_count();
    if (threads <= 1 || n <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t t = std::min<std::size_t>(threads, n);
    std::vector<std::thread> workers;
    workers.reserve(t);
    const std::size_t chunk = (n + t - 1) / t;
    for (std::size_t w = 0; w < t; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : workers) th.join();
}

}  // namespace axial
