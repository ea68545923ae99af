#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace bat {

// Work is split into blocks by a fixed policy (never by thread count), each
// block is computed by exactly one worker with a fixed inner loop order, and
// cross-block reductions are combined in block order. Results are therefore
// bit-identical for any thread count.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void run(int n_blocks, int n_workers, const std::function<void(int)>& body) {
        if (n_workers <= 1 || n_blocks <= 1 || inside_worker_) {
            for (int b = 0; b < n_blocks; ++b) body(b);
            return;
        }
        ensure_started(n_workers - 1);
        std::unique_lock<std::mutex> lock(mutex_);
        body_ = &body;
        next_block_.store(0, std::memory_order_relaxed);
        total_blocks_ = n_blocks;
        pending_ = std::min<int>(n_workers - 1, (int)workers_.size());
        ++generation_;
        lock.unlock();
        cv_.notify_all();

        work_loop(body, n_blocks);  // main thread participates

        std::unique_lock<std::mutex> lock2(mutex_);
        done_cv_.wait(lock2, [this] { return pending_ == 0; });
        body_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    ThreadPool() = default;

    void ensure_started(int n) {
        std::lock_guard<std::mutex> lock(mutex_);
        while ((int)workers_.size() < n) {
            workers_.emplace_back([this] { worker_main(); });
        }
    }

    void worker_main() {
        inside_worker_ = true;
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* body = nullptr;
            int total = 0;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                body = body_;
                total = total_blocks_;
            }
            if (body) work_loop(*body, total);
            {
                std::lock_guard<std::mutex> lock(mutex_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    void work_loop(const std::function<void(int)>& body, int total) {
        for (;;) {
            int b = next_block_.fetch_add(1, std::memory_order_relaxed);
            if (b >= total) return;
            body(b);
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int)>* body_ = nullptr;
    std::atomic<int> next_block_{0};
    int total_blocks_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
    static thread_local bool inside_worker_;
};

inline thread_local bool ThreadPool::inside_worker_ = false;

inline int& thread_count_ref() {
    static int n = 1;
    return n;
}

inline void set_num_threads(int n) { thread_count_ref() = n < 1 ? 1 : n; }
inline int num_threads() { return thread_count_ref(); }

// Calls fn(block_index) for blocks covering [0, n) in chunks of block_size.
// fn receives the block index; use block_bounds to recover the range.
inline void parallel_blocks(int n_blocks, const std::function<void(int)>& fn) {
    ThreadPool::instance().run(n_blocks, num_threads(), fn);
}

inline std::pair<long, long> block_bounds(long n, long block_size, int block) {
    long lo = (long)block * block_size;
    long hi = lo + block_size;
    if (hi > n) hi = n;
    return {lo, hi};
}

inline int block_count(long n, long block_size) {
    return (int)((n + block_size - 1) / block_size);
}

}  // namespace bat
