#include "ensemble/parallel.hpp"

#include <cstdlib>
#include <exception>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ensemble {

namespace {
int g_thread_limit = 0;
}

void set_thread_limit(int threads) { g_thread_limit = threads > 0 ? threads : 0; }

int thread_limit() {
#ifdef _OPENMP
  return g_thread_limit > 0 ? g_thread_limit : omp_get_max_threads();
#else
  return 1;
#endif
}

void apply_thread_env() {
  if (const char* env = std::getenv("ENSEMBLECTL_THREADS")) {
    try {
      set_thread_limit(std::stoi(env));
    } catch (...) {
      set_thread_limit(0);
    }
  }
}

void parallel_for(std::ptrdiff_t count, const std::function<void(std::ptrdiff_t)>& body) {
#ifdef _OPENMP
  const int threads = thread_limit();
  if (threads > 1 && count > 1) {
    std::exception_ptr failure;
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      try {
        body(i);
      } catch (...) {
#pragma omp critical(ensemble_parallel_failure)
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
    return;
  }
#endif
  for (std::ptrdiff_t i = 0; i < count; ++i) body(i);
}

}  // namespace ensemble
