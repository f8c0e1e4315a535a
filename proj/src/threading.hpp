#ifndef LW_THREADING_HPP
#define LW_THREADING_HPP

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace lw {

// Runs fn(begin, end) over contiguous chunks of [0, n). Each chunk writes only
// its own output slots, so results are identical for any thread count.
template <typename Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
    if (n == 0) {
        return;
    }
    int workers = std::max(1, threads);
    if (workers == 1 || n < 2) {
        fn(size_t{0}, n);
        return;
    }
    workers = static_cast<int>(std::min<size_t>(workers, n));
    size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int i = 0; i < workers; ++i) {
        size_t begin = static_cast<size_t>(i) * chunk;
        size_t end = std::min(n, begin + chunk);
        if (begin >= end) {
            break;
        }
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& t : pool) {
        t.join();
    }
}

}  // namespace lw

#endif
