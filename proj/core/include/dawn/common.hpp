#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dawn {

// Error taxonomy. The CLI maps these onto exit codes (usage 2,
// incompatibility 3, numerical failure 4).
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IncompatibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Worker threads used by the heavy kernels (gemm, conv, elementwise).
// Parallel partitions never split a reduction axis, so results are
// bit-identical for any thread count.
void set_num_threads(int n);
int num_threads();

}  // namespace dawn
