#pragma once

namespace unsafespot::parallel {

/// Caps worker threads for the OpenMP kernels; 0 restores the runtime default.
void set_jobs(int jobs);
int max_jobs();

}  // namespace unsafespot::parallel
