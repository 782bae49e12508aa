#include "sgseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sgseg {

GradCheckResult check_gradients_detailed(const ScalarFn& f, std::vector<TensorD> inputs, double h) {
    for (auto& t : inputs) t.zero_grad();
    const TensorD y = f(inputs);
    backward(y);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) {
        if (t.requires_grad() && t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }

    GradCheckResult res;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        auto data = inputs[k].data();
        for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
            const double orig = data[static_cast<std::size_t>(i)];
            data[static_cast<std::size_t>(i)] = orig + h;
            const double fp = f(inputs).item();
            data[static_cast<std::size_t>(i)] = orig - h;
            const double fm = f(inputs).item();
            data[static_cast<std::size_t>(i)] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double a = analytic[k][static_cast<std::size_t>(i)];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_input = k;
                res.worst_index = i;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace sgseg
