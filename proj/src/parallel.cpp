#include "shiq/parallel.hpp"

#include <omp.h>

#include <cstdlib>
#include <string>

namespace shiq {

namespace {
int g_cap = 0;
}

int worker_count() {
    const int n = omp_get_max_threads();
    return g_cap > 0 && g_cap < n ? g_cap : n;
}

void set_worker_cap(int cap) { g_cap = cap > 0 ? cap : 0; }

void apply_thread_env() {
    if (const char* v = std::getenv("SHIQ_LAB_THREADS")) {
        try {
            set_worker_cap(std::stoi(v));
        } catch (const std::exception&) {
            set_worker_cap(0);
        }
    }
}

} // namespace shiq
