#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace ionflux {

// Worker count from IONFLUX_JOBS, else the number of logical cores.
inline int default_jobs() {
    if (const char* env = std::getenv("IONFLUX_JOBS")) {
        try {
            const int v = std::stoi(env);
            if (v > 0) return v;
        } catch (const std::exception&) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, count). Results must be written to per-index slots,
// so the outcome does not depend on the worker count. The first exception
// (lowest index) is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t count, int jobs, Fn&& fn) {
    if (count == 0) return;
    const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(jobs, static_cast<int>(count))));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace ionflux
