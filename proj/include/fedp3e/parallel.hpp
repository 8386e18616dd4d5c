#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace fedp3e {

/// Worker cap: FEDP3E_MAX_WORKERS if set and positive, else hardware concurrency.
inline std::size_t max_workers() {
    if (const char* env = std::getenv("FEDP3E_MAX_WORKERS")) {
        try {
            long v = std::stol(env);
            if (v > 0) {
                return static_cast<std::size_t>(v);
            }
        } catch (const std::exception&) {
        }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n). Tasks share no mutable state, so the result is
/// independent of the worker count. The exception of the lowest failing index
/// is rethrown after all workers join.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = max_workers()) {
    std::vector<std::exception_ptr> errors(n);
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace fedp3e
