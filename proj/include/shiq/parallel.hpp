#pragma once

namespace shiq {

/// Selects between the OpenMP kernels and the serial reference path.
/// Both paths produce bitwise-identical results.
enum class Execution { serial, parallel };

/// Worker count used by parallel kernels.
int worker_count();

/// Caps the worker count; values < 1 reset to the OpenMP default.
void set_worker_cap(int cap);

/// Applies SHIQ_LAB_THREADS from the environment, if set.
void apply_thread_env();

} // namespace shiq
