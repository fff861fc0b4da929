#include "leanq/parallel.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <thread>
#include <vector>

namespace leanq {

namespace {

unsigned env_cap() {
  if (const char* env = std::getenv("LEANQ_THREADS")) {
    unsigned cap = 0;
    const auto [ptr, ec] = std::from_chars(env, env + std::strlen(env), cap);
    if (ec == std::errc{} && cap > 0) return cap;
  }
  return 0;
}

}  // namespace

unsigned default_workers() {
  const unsigned n = std::max(1u, std::thread::hardware_concurrency());
  const unsigned cap = env_cap();
  return cap > 0 ? std::min(n, cap) : n;
}

unsigned resolve_workers(unsigned requested) {
  if (requested == 0) return default_workers();
  const unsigned cap = env_cap();
  return cap > 0 ? std::min(requested, cap) : requested;
}

void parallel_for(std::size_t n, unsigned workers,
                  const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  workers = static_cast<unsigned>(std::min<std::size_t>(resolve_workers(workers), n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        const std::size_t begin = n * w / workers;
        const std::size_t end = n * (w + 1) / workers;
        try {
          for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace leanq
