#pragma once

#include <functional>
#include <vector>

#include "sgseg/tensor.hpp"

namespace sgseg {

using ScalarFn = std::function<TensorD(const std::vector<TensorD>&)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::int64_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Compares reverse-mode gradients of `f` against central differences for
// every coordinate of every input that requires a gradient. The error per
// coordinate is |a - n| / max(1, |a|, |n|).
GradCheckResult check_gradients_detailed(const ScalarFn& f, std::vector<TensorD> inputs, double h = 1e-5);

inline double check_gradients(const ScalarFn& f, std::vector<TensorD> inputs, double h = 1e-5) {
    return check_gradients_detailed(f, std::move(inputs), h).max_rel_error;
}

}  // namespace sgseg
