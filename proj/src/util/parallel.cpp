#include "macswin/util/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace macswin {

namespace {

int resolve_thread_count() {
  if (const char* env = std::getenv("MACSWIN_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return std::min(n, 64);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return int(std::clamp(hw, 1u, 8u));
}

// Minimal persistent pool. Tasks are (begin, end) range calls; submit blocks
// until every chunk has run, so the pool never interleaves two loops.
class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(const std::vector<std::pair<int64_t, int64_t>>& chunks,
           const std::function<void(int64_t, int64_t)>& fn) {
    {
      std::lock_guard lk(mu_);
      chunks_ = &chunks;
      fn_ = &fn;
      next_ = 0;
      pending_ = chunks.size();
    }
    cv_.notify_all();
    help();
    std::unique_lock lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    chunks_ = nullptr;
    fn_ = nullptr;
  }

 private:
  void help() {
    for (;;) {
      size_t idx;
      {
        std::lock_guard lk(mu_);
        if (chunks_ == nullptr || next_ >= chunks_->size()) return;
        idx = next_++;
      }
      (*fn_)((*chunks_)[idx].first, (*chunks_)[idx].second);
      std::lock_guard lk(mu_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  void worker_loop() {
    for (;;) {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [this] { return stop_ || (chunks_ != nullptr && next_ < chunks_->size()); });
      if (stop_) return;
      lk.unlock();
      help();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  const std::vector<std::pair<int64_t, int64_t>>* chunks_ = nullptr;
  const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
  size_t next_ = 0;
  size_t pending_ = 0;
  bool stop_ = false;
};

Pool& pool() {
  static Pool p(thread_count() - 1);
  return p;
}

}  // namespace

int thread_count() {
  static int n = resolve_thread_count();
  return n;
}

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int workers = thread_count();
  if (workers <= 1 || n < grain) {
    fn(0, n);
    return;
  }
  int64_t chunks = std::min<int64_t>(workers, (n + grain - 1) / grain);
  std::vector<std::pair<int64_t, int64_t>> ranges;
  ranges.reserve(chunks);
  int64_t step = (n + chunks - 1) / chunks;
  for (int64_t b = 0; b < n; b += step) {
    ranges.emplace_back(b, std::min(n, b + step));
  }
  pool().run(ranges, fn);
}

}  // namespace macswin
