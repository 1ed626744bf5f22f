#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace somno {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness in the library goes through this class so
// that results are bit-reproducible across runs and thread counts. The
// distributions are hand-rolled: std:: distribution objects are
// implementation-defined and would tie outputs to a particular stdlib.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(mix(seed)) {}

  std::uint64_t next() { return eng_(); }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cache_ = r * std::sin(a);
    has_cache_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). Multiplicative method.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_index: n == 0");
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Exponential with the given rate (events per unit time).
  double exponential(double rate) {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return -std::log(u) / rate;
  }

  // Independent stream derived from the original seed; consuming from the
  // parent does not perturb forks.
  Rng fork(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x9e3779b97f4a7c15ull)));
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 eng_;
  double cache_ = 0.0;
  bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Shared thread pool for data-parallel loops. Each index is computed by
// exactly one thread with a fixed per-index instruction order, so results are
// bit-identical regardless of thread count. Callers must not reduce into
// shared state across indices.
// ---------------------------------------------------------------------------
namespace detail {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    const std::size_t nthreads = threads_.size() + 1;
    if (nthreads == 1 || n == 1 || inside_job()) {
      body(0, n);  // nested loops run serially
      return;
    }
    std::lock_guard<std::mutex> run_lock(run_mutex_);
    inside_job() = true;
    const std::size_t chunks = std::min(n, nthreads);
    const std::size_t base = n / chunks, rem = n % chunks;
    std::size_t at = 0;
    for (std::size_t c = 0; c < chunks; ++c) {
      const std::size_t len = base + (c < rem ? 1 : 0);
      ranges_[c] = {at, at + len};
      at += len;
    }
    job_body_ = &body;
    n_chunks_.store(chunks, std::memory_order_relaxed);
    pending_.store(static_cast<long>(chunks), std::memory_order_relaxed);
    // Publishing next_chunk_ makes the job state above visible to claimants.
    next_chunk_.store(0, std::memory_order_release);
    {
      std::lock_guard<std::mutex> g(mutex_);
      ++generation_;
    }
    cv_.notify_all();
    work_loop();
    {
      std::unique_lock<std::mutex> g(mutex_);
      done_cv_.wait(g, [&] { return pending_.load(std::memory_order_acquire) == 0; });
    }
    inside_job() = false;
  }

 private:
  ThreadPool() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SOMNO_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) n = v;
    }
    if (n < 1) n = 1;
    ranges_.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n - 1; ++i) {
      threads_.emplace_back([this] { worker(); });
    }
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> g(mutex_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  static bool& inside_job() {
    thread_local bool flag = false;
    return flag;
  }

  void worker() {
    inside_job() = true;  // bodies running on workers must not re-enter
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> g(mutex_);
        cv_.wait(g, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
      }
      work_loop();
    }
  }

  void work_loop() {
    for (;;) {
      const std::size_t c = next_chunk_.fetch_add(1, std::memory_order_acq_rel);
      if (c >= n_chunks_.load(std::memory_order_relaxed)) return;
      (*job_body_)(ranges_[c].first, ranges_[c].second);
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> g(mutex_);
        done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mutex_, run_mutex_;
  std::condition_variable cv_, done_cv_;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  const std::function<void(std::size_t, std::size_t)>* job_body_ = nullptr;
  std::vector<std::pair<std::size_t, std::size_t>> ranges_;
  std::atomic<std::size_t> n_chunks_{0};
  std::atomic<std::size_t> next_chunk_{~std::size_t(0) >> 1};
  std::atomic<long> pending_{0};
};

}  // namespace detail

// Runs body(first, last) over a partition of [0, n).
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  detail::ThreadPool::instance().run(n, body);
}

// ---------------------------------------------------------------------------
// Little-endian binary I/O helpers for the on-disk formats.
// ---------------------------------------------------------------------------
namespace io {

template <class T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_le<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("unexpected end of file");
  return s;
}

}  // namespace io

// FNV-1a 64-bit, used for artifact fingerprints in pipeline manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file for hashing: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(f.gcount()), h);
  }
  return h;
}

}  // namespace somno
