#include "mvjump/threading.hpp"

#include <atomic>
#include <thread>
#include <vector>

namespace mvj {

namespace {
std::atomic<unsigned> g_threads{1};
}

void set_thread_count(unsigned n) { g_threads.store(n == 0 ? std::thread::hardware_concurrency() : n); }

unsigned thread_count() {
    unsigned n = g_threads.load();
    return n == 0 ? 1 : n;
}

std::size_t n_chunks(std::size_t n, std::size_t chunk_size) {
    if (chunk_size == 0) chunk_size = 1;
    return (n + chunk_size - 1) / chunk_size;
}

void parallel_chunks(std::size_t n, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    if (chunk_size == 0) chunk_size = 1;
    const std::size_t chunks = n_chunks(n, chunk_size);
    const unsigned workers = std::min<std::size_t>(thread_count(), chunks);

    if (workers <= 1) {
        for (std::size_t c = 0; c < chunks; ++c)
            body(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::atomic<bool> has_error{false};
    auto run = [&] {
        for (;;) {
            std::size_t c = next.fetch_add(1);
            if (c >= chunks || has_error.load()) return;
            try {
                body(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
            } catch (...) {
                if (!has_error.exchange(true)) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
    if (has_error.load()) std::rethrow_exception(first_error);
}

} // namespace mvj
