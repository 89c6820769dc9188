#include "masqlab/threads.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace masqlab {

namespace {

int resolve_worker_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("MASQLAB_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

// Persistent pool; tasks are (begin, end) ranges of the current job.
class Pool {
public:
    static Pool& instance() {
        static Pool pool(resolve_worker_count());
        return pool;
    }

    int size() const { return static_cast<int>(threads_.size()) + 1; }

    void run(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
        const int workers = size();
        const std::int64_t chunk = (n + workers - 1) / workers;
        {
            std::unique_lock<std::mutex> lk(mu_);
            job_fn_ = &fn;
            job_n_ = n;
            job_chunk_ = chunk;
            next_chunk_ = 1;  // chunk 0 runs on the calling thread
            pending_ = 0;
            for (int i = 1; i < workers; ++i) {
                if (static_cast<std::int64_t>(i) * chunk < n) ++pending_;
            }
            generation_++;
            cv_.notify_all();
        }
        fn(0, std::min<std::int64_t>(chunk, n));
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        job_fn_ = nullptr;
    }

private:
    explicit Pool(int workers) {
        for (int i = 1; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
            cv_.notify_all();
        }
        for (auto& t : threads_) t.join();
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        for (;;) {
            std::int64_t begin = 0, end = 0;
            const std::function<void(std::int64_t, std::int64_t)>* fn = nullptr;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                const std::int64_t idx = next_chunk_++;
                begin = idx * job_chunk_;
                end = std::min(begin + job_chunk_, job_n_);
                fn = job_fn_;
                if (begin >= job_n_) continue;
            }
            (*fn)(begin, end);
            {
                std::unique_lock<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::int64_t, std::int64_t)>* job_fn_ = nullptr;
    std::int64_t job_n_ = 0;
    std::int64_t job_chunk_ = 0;
    std::int64_t next_chunk_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace

int worker_count() { return Pool::instance().size(); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (n == 1 || worker_count() == 1) {
        fn(0, n);
        return;
    }
    Pool::instance().run(n, fn);
}

}  // namespace masqlab
