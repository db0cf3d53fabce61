#pragma once

// Shared plumbing: error types, shape helpers, deterministic RNG and the
// worker pool used by the 3D kernels.

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vsx {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// ---------------------------------------------------------------------------
// Errors

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimension disagreement (operand shapes, axis bounds).
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

/// Invalid argument value (bad stride, unknown model kind, ...).
class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& msg) : Error("argument error: " + msg) {}
};

/// Operation issued against an object in the wrong state.
class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};

/// Malformed input data (labels, file contents).
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

/// Filesystem / stream failure.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// ---------------------------------------------------------------------------
// Shapes

using Shape = std::vector<i64>;

inline i64 numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ArgumentError(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// mt19937_64 plus hand-rolled distributions so that streams are identical
// across standard libraries, not just across runs.

class Rng {
 public:
  explicit Rng(u64 seed) : state_(seed) {}

  u64 next_u64() { return state_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(state_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  u64 below(u64 n) {
    // Lemire multiply-shift, unbiased.
    unsigned __int128 m = static_cast<unsigned __int128>(state_()) * n;
    u64 lo = static_cast<u64>(m);
    if (lo < n) {
      u64 t = (0 - n) % n;
      while (lo < t) {
        m = static_cast<unsigned __int128>(state_()) * n;
        lo = static_cast<u64>(m);
      }
    }
    return static_cast<u64>(m >> 64);
  }

  /// Standard normal via Box-Muller (cached spare).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Worker pool
//
// Kernels parallelize across disjoint output slabs; every output element is
// written by exactly one task with a fixed inner reduction order, so results
// are bit-identical for any thread count. VSX_THREADS caps the pool size.

namespace detail {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int threads() const { return threads_; }

  // Runs fn(0..chunks-1), blocking until every chunk is done. Chunks are
  // claimed atomically; a worker that arrives late finds nothing to claim.
  void run(int chunks, const std::function<void(int)>& fn) {
    if (chunks <= 0) return;
    if (threads_ <= 1 || chunks == 1 || in_worker()) {
      for (int c = 0; c < chunks; ++c) fn(c);
      return;
    }
    auto job = std::make_shared<Job>();
    job->chunks = chunks;
    job->fn = fn;
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = job;
      ++job_gen_;
    }
    cv_.notify_all();
    execute(*job);  // the calling thread participates
    while (job->done.load(std::memory_order_acquire) < chunks) {
      std::this_thread::yield();
    }
    std::lock_guard<std::mutex> lk(mu_);
    if (job_ == job) job_.reset();
  }

 private:
  struct Job {
    std::atomic<int> next{0};
    std::atomic<int> done{0};
    int chunks = 0;
    std::function<void(int)> fn;
  };

  ThreadPool() {
    threads_ = decide_threads();
    for (int i = 0; i < threads_ - 1; ++i) {
      workers_.emplace_back([this]() { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  static int decide_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("VSX_THREADS")) {
      char* end = nullptr;
      long v = std::strtol(env, &end, 10);
      if (end != env && v >= 1) hw = std::min(hw, static_cast<int>(std::min<long>(v, 1024)));
    }
    return hw;
  }

  static bool& in_worker() {
    thread_local bool flag = false;
    return flag;
  }

  static void execute(Job& job) {
    in_worker() = true;
    int c;
    while ((c = job.next.fetch_add(1, std::memory_order_relaxed)) < job.chunks) {
      job.fn(c);
      job.done.fetch_add(1, std::memory_order_release);
    }
    in_worker() = false;
  }

  void worker_loop() {
    u64 seen = 0;
    while (true) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&]() { return stop_ || (job_ && job_gen_ != seen); });
        if (stop_) return;
        seen = job_gen_;
        job = job_;
      }
      if (job) execute(*job);
    }
  }

  int threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::shared_ptr<Job> job_;
  u64 job_gen_ = 0;
  bool stop_ = false;
};

}  // namespace detail

/// Number of kernel threads in use (>= 1).
inline int kernel_threads() { return detail::ThreadPool::instance().threads(); }

/// Splits [0, n) into contiguous ranges and runs body(begin, end) on the pool.
/// Deterministic: the mapping from index to range never depends on timing.
template <typename F>
void parallel_for(i64 n, F&& body, i64 grain = 1) {
  if (n <= 0) return;
  int t = kernel_threads();
  i64 max_chunks = std::max<i64>(1, n / std::max<i64>(grain, 1));
  int chunks = static_cast<int>(std::min<i64>(t, max_chunks));
  if (chunks <= 1) {
    body(i64{0}, n);
    return;
  }
  i64 per = (n + chunks - 1) / chunks;
  detail::ThreadPool::instance().run(chunks, [&](int c) {
    i64 b = c * per;
    i64 e = std::min<i64>(n, b + per);
    if (b < e) body(b, e);
  });
}

// ---------------------------------------------------------------------------
// NaN/Inf guard (assertable mode; off by default)

inline bool& finite_checks() {
  static bool enabled = false;
  return enabled;
}

inline void set_finite_checks(bool on) { finite_checks() = on; }

template <typename S>
void assert_all_finite(const std::vector<S>& v, const char* where) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(static_cast<double>(v[i]))) {
      throw StateError(std::string("non-finite value in ") + where + " at index " +
                       std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Warning sink: non-fatal diagnostics (e.g. clamped hyperparameters,
// empty evaluation splits) accumulate here for the caller to surface.

inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}

inline std::vector<std::string>& warning_storage() {
  static std::vector<std::string> log;
  return log;
}

inline void emit_warning(std::string msg) {
  std::lock_guard<std::mutex> lock(warning_mutex());
  warning_storage().push_back(std::move(msg));
}

/// Returns all warnings emitted since the last drain and clears the log.
inline std::vector<std::string> drain_warnings() {
  std::lock_guard<std::mutex> lock(warning_mutex());
  std::vector<std::string> out;
  out.swap(warning_storage());
  return out;
}

}  // namespace vsx

