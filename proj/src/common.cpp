#include "headlens/common.hpp"

#include <atomic>
#include <cstdio>
#include <thread>
#include <vector>

namespace headlens {

std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

int eval_thread_cap() {
    const char *env = std::getenv("HEADLENS_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    int n = std::atoi(env);
    if (n < 1) return 1;
    unsigned hw = std::thread::hardware_concurrency();
    if (hw > 0 && n > static_cast<int>(hw)) n = static_cast<int>(hw);
    return n;
}

void parallel_for_indexed(int64_t n, const std::function<void(int64_t)> &fn) {
    const int cap = eval_thread_cap();
    if (cap <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    const int workers = static_cast<int>(std::min<int64_t>(cap, n));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            int64_t i;
            while ((i = next.fetch_add(1)) < n) fn(i);
        });
    }
    for (auto &t : pool) t.join();
}

}  // namespace headlens
