// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace nfsim {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline void ensure(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

// ---------------------------------------------------------------------------
// Seeded RNG. splitmix64 core; every stochastic component derives its own
// stream from (seed, stream ids...) so results never depend on call order.
// ---------------------------------------------------------------------------

struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed = 0) : state(seed) {
    // decorrelate trivially close seeds
    next_u64();
    next_u64();
  }

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  int uniform_int(int n) {
    return n <= 1 ? 0 : int(next_u64() % uint64_t(n));
  }

  int64_t uniform_i64(int64_t n) {
    return n <= 1 ? 0 : int64_t(next_u64() % uint64_t(n));
  }

  // Box-Muller; draws two uniforms per call so the stream stays stateless.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
};

// Fold extra stream ids into a base seed.
inline uint64_t derive_seed(uint64_t seed) { return seed; }

template <typename... Rest>
inline uint64_t derive_seed(uint64_t seed, uint64_t s0, Rest... rest) {
  Rng r(seed ^ (s0 * 0x9e3779b97f4a7c15ull + 0x165667b19e3779f9ull));
  return derive_seed(r.next_u64(), rest...);
}

// ---------------------------------------------------------------------------
// Worker pool. parallel_for partitions [0, n) into contiguous ranges; each
// range writes disjoint outputs, so results are identical for any worker
// count. Reductions must not use this directly.
// ---------------------------------------------------------------------------

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  // Total lanes including the calling thread. n >= 1.
  void set_workers(int n) {
    std::lock_guard<std::mutex> lk(api_mutex_);
    n = n < 1 ? 1 : n;
    stop_threads();
    lanes_ = n;
    start_threads();
  }

  int workers() {
    std::lock_guard<std::mutex> lk(api_mutex_);
    return lanes_;
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    std::lock_guard<std::mutex> lk(api_mutex_);
    int lanes = lanes_;
    if (lanes <= 1 || n == 1 || threads_.empty()) {
      fn(0, n);
      return;
    }
    if (int64_t(lanes) > n) lanes = int(n);

    job_fn_ = &fn;
    job_n_ = n;
    job_lanes_ = lanes;
    job_error_ = nullptr;
    pending_.store(lanes - 1, std::memory_order_release);
    {
      std::lock_guard<std::mutex> jl(job_mutex_);
      job_id_++;
    }
    job_cv_.notify_all();

    run_range(0, lanes);  // lane 0 on the calling thread

    std::unique_lock<std::mutex> dl(done_mutex_);
    done_cv_.wait(dl, [&] { return pending_.load(std::memory_order_acquire) == 0; });
    job_fn_ = nullptr;
    if (job_error_) std::rethrow_exception(job_error_);
  }

  ~ThreadPool() { stop_threads(); }

 private:
  ThreadPool() {
    lanes_ = int(std::thread::hardware_concurrency());
    if (lanes_ < 1) lanes_ = 1;
    start_threads();
  }

  void run_range(int lane, int lanes) {
    int64_t chunk = (job_n_ + lanes - 1) / lanes;
    int64_t begin = lane * chunk;
    int64_t end = begin + chunk < job_n_ ? begin + chunk : job_n_;
    if (begin >= end) return;
    try {
      (*job_fn_)(begin, end);
    } catch (...) {
      std::lock_guard<std::mutex> el(done_mutex_);
      if (!job_error_) job_error_ = std::current_exception();
    }
  }

  void worker_main(int slot) {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(job_mutex_);
      job_cv_.wait(lk, [&] { return stopping_ || job_id_ != seen; });
      if (stopping_) return;
      seen = job_id_;
      int lanes = job_lanes_;
      lk.unlock();
      if (slot + 1 < lanes) {
        run_range(slot + 1, lanes);
        if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
          std::lock_guard<std::mutex> dl(done_mutex_);
          done_cv_.notify_all();
        }
      } else {
        if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
          std::lock_guard<std::mutex> dl(done_mutex_);
          done_cv_.notify_all();
        }
      }
    }
  }

  void start_threads() {
    stopping_ = false;
    for (int i = 0; i + 1 < lanes_; i++) {
      threads_.emplace_back([this, i] { worker_main(i); });
    }
  }

  void stop_threads() {
    {
      std::lock_guard<std::mutex> lk(job_mutex_);
      stopping_ = true;
    }
    job_cv_.notify_all();
    for (auto& t : threads_) t.join();
    threads_.clear();
  }

  std::mutex api_mutex_;
  std::mutex job_mutex_;
  std::mutex done_mutex_;
  std::condition_variable job_cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int job_lanes_ = 1;
  uint64_t job_id_ = 0;
  int lanes_ = 1;
  bool stopping_ = false;
  std::atomic<int> pending_{0};
  std::exception_ptr job_error_;
};

inline void set_worker_count(int n) { ThreadPool::instance().set_workers(n); }

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  ThreadPool::instance().run(n, fn);
}

// Serial work below this size; threading overhead dominates otherwise.
constexpr int64_t kParallelCutoff = 16384;

inline void maybe_parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n < kParallelCutoff) {
    fn(0, n);
  } else {
    parallel_for(n, fn);
  }
}

}  // namespace nfsim
