#include "dawn/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <algorithm>
#include <thread>

namespace dawn {

namespace {
int g_threads = []() {
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp<unsigned>(hw ? hw : 1, 1, 8));
}();
}  // namespace

void set_num_threads(int n) {
    g_threads = std::max(1, n);
#ifdef _OPENMP
    omp_set_num_threads(g_threads);
#endif
}

int num_threads() { return g_threads; }

}  // namespace dawn
