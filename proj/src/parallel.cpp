#include "coexmap/parallel.hpp"

#include <atomic>

namespace coexmap {

namespace {
std::atomic<int> g_thread_cap{0};
}

void set_thread_cap(int cap) {
    g_thread_cap.store(cap > 0 ? cap : 0);
}

int thread_cap() {
    int cap = g_thread_cap.load();
    if (cap > 0) return cap;
    if (const char* env = std::getenv("COEXMAP_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(Index n, const std::function<void(Index, Index)>& fn) {
    if (n <= 0) return;
    const int workers = std::min<Index>(thread_cap(), n);
    if (workers <= 1) {
        fn(0, n);
        return;
    }
    const Index chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mutex;
    for (int w = 0; w < workers; ++w) {
        const Index begin = static_cast<Index>(w) * chunk;
        const Index end = std::min<Index>(begin + chunk, n);
        if (begin >= end) break;
        pool.emplace_back([&, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

} // namespace coexmap
