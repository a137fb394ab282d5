#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "meldiff/autograd.hpp"

namespace meldiff::testing {

// Central finite differences against reverse-mode gradients. The forward
// callable rebuilds the graph from scratch each call so the numeric side
// never touches the recorded backward functions.
struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    int64_t checked = 0;
};

inline GradCheckResult check_gradients(const std::vector<ag::Var>& inputs,
                                       const std::function<ag::Var()>& forward,
                                       double step = 1e-5,
                                       int64_t max_per_tensor = -1) {
    for (const ag::Var& input : inputs)
        if (input->grad.defined()) input->grad.fill_(0.0);
    ag::Var loss = forward();
    ag::backward(loss);

    GradCheckResult result;
    for (const ag::Var& input : inputs) {
        const int64_t n = input->value.size();
        const int64_t stride = (max_per_tensor > 0 && n > max_per_tensor)
                                   ? (n + max_per_tensor - 1) / max_per_tensor
                                   : 1;
        for (int64_t i = 0; i < n; i += stride) {
            const double saved = input->value[i];
            input->value[i] = saved + step;
            const double up = forward()->value[0];
            input->value[i] = saved - step;
            const double down = forward()->value[0];
            input->value[i] = saved;

            const double numeric = (up - down) / (2.0 * step);
            const double analytic = input->grad.defined() ? input->grad[i] : 0.0;
            const double abs_err = std::abs(numeric - analytic);
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            result.max_abs_error = std::max(result.max_abs_error, abs_err);
            result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
            ++result.checked;
        }
    }
    return result;
}

}  // namespace meldiff::testing
