#include "mpe/common.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>

namespace mpe {

namespace {
int resolve_default() {
  if (const char* env = std::getenv("MPE_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1, omp_get_max_threads());
}
int g_threads = 0;
}  // namespace

int num_threads() {
  if (g_threads == 0) g_threads = resolve_default();
  return g_threads;
}

void set_num_threads(int n) { g_threads = std::max(1, n); }

}  // namespace mpe
