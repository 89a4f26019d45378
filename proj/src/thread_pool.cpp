#include "mmdc/thread_pool.hpp"

#include <algorithm>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace mmdc::pool {

namespace {

// Nested parallel_for calls (kernel invoked from inside a parallel
// region) run inline on the calling worker.
thread_local bool t_in_worker = false;

class Pool {
public:
    explicit Pool(int n) : n_workers_(n - 1) {
        workers_.reserve(n_workers_);
        for (int i = 0; i < n_workers_; ++i) {
            workers_.emplace_back([this, i] { worker_loop(i); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    int size() const { return n_workers_ + 1; }

    void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        const int lanes = size();
        const int64_t chunk = (n + lanes - 1) / lanes;
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_ = &fn;
            job_n_ = n;
            job_chunk_ = chunk;
            pending_ = n_workers_;
            ++generation_;
        }
        cv_.notify_all();
        // lane 0 runs on the calling thread
        const int64_t e0 = std::min<int64_t>(chunk, n);
        if (e0 > 0) {
            t_in_worker = true;
            fn(0, e0);
            t_in_worker = false;
        }
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    void worker_loop(int lane_minus1) {
        const int lane = lane_minus1 + 1;
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int64_t, int64_t)>* job = nullptr;
            int64_t n = 0, chunk = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                job = job_;
                n = job_n_;
                chunk = job_chunk_;
            }
            const int64_t b = std::min<int64_t>(chunk * lane, n);
            const int64_t e = std::min<int64_t>(chunk * (lane + 1), n);
            if (job && b < e) {
                t_in_worker = true;
                (*job)(b, e);
                t_in_worker = false;
            }
            {
                std::lock_guard<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_one();
            }
        }
    }

    const int n_workers_;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int64_t, int64_t)>* job_ = nullptr;
    int64_t job_n_ = 0, job_chunk_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

std::unique_ptr<Pool> g_pool;
std::mutex g_pool_mu;
int g_requested = 0;

int resolve(int n) {
    if (n <= 0) {
        unsigned hw = std::thread::hardware_concurrency();
        n = hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
    }
    return n;
}

Pool* get() {
    std::lock_guard<std::mutex> lk(g_pool_mu);
    if (!g_pool) g_pool = std::make_unique<Pool>(resolve(g_requested));
    return g_pool.get();
}

}  // namespace

void set_threads(int n) {
    std::lock_guard<std::mutex> lk(g_pool_mu);
    const int want = resolve(n);
    if (g_pool && g_pool->size() == want) return;
    g_pool.reset();
    g_requested = n;
    g_pool = std::make_unique<Pool>(want);
}

int threads() { return get()->size(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (t_in_worker) {
        fn(0, n);
        return;
    }
    Pool* p = get();
    if (p->size() == 1 || n < 128) {
        fn(0, n);
        return;
    }
    p->run(n, fn);
}

}  // namespace mmdc::pool
