#include "unsafespot/parallel.hpp"

#include <omp.h>

namespace unsafespot::parallel {

namespace {
const int kDefaultThreads = omp_get_max_threads();
}

void set_jobs(int jobs) { omp_set_num_threads(jobs > 0 ? jobs : kDefaultThreads); }

int max_jobs() { return omp_get_max_threads(); }

}  // namespace unsafespot::parallel
