#include "arbor/parallel.hpp"

#include <algorithm>
#include <cstdlib>

namespace arbor {

int thread_limit() {
#ifdef _OPENMP
  int nt = omp_get_max_threads();
#else
  int nt = 1;
#endif
  if (const char* env = std::getenv("ARBOR_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) nt = std::min(nt, static_cast<int>(v));
  }
  return std::max(nt, 1);
}

}  // namespace arbor
