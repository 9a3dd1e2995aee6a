#pragma once

#include <functional>

#include "tandem/core/ops.hpp"

namespace tandem {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

/// Independent check of reverse-mode gradients against central differences.
/// The builder receives leaf Vars for every input (the first n_params marked
/// as differentiation targets) and returns the scalar output. Relative error
/// uses max(|analytic|, |numeric|, 1e-8) as denominator.
inline GradCheckResult check_gradients(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    std::vector<Array> inputs, size_t n_params, double h = 1e-6) {
    GradCheckResult res;

    auto eval = [&](const std::vector<Array>& xs) {
        Tape t;
        std::vector<Var> vars;
        vars.reserve(xs.size());
        for (size_t i = 0; i < xs.size(); ++i) vars.push_back(t.leaf(xs[i], i < n_params));
        return t.val(build(t, vars))[0];
    };

    std::vector<Array> analytic;
    {
        Tape t;
        std::vector<Var> vars;
        for (size_t i = 0; i < inputs.size(); ++i) vars.push_back(t.leaf(inputs[i], i < n_params));
        Var loss = build(t, vars);
        require(t.val(loss).numel() == 1, "check_gradients: output must be scalar");
        t.backward(loss);
        for (size_t i = 0; i < n_params; ++i) analytic.push_back(t.grad(vars[i]));
    }

    for (size_t p = 0; p < n_params; ++p) {
        for (int64_t i = 0; i < inputs[p].numel(); ++i) {
            const double orig = inputs[p][i];
            const double step = h * std::max(1.0, std::abs(orig));
            inputs[p][i] = orig + step;
            const double fp = eval(inputs);
            inputs[p][i] = orig - step;
            const double fm = eval(inputs);
            inputs[p][i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[p][i];
            const double denom = std::max({1e-8, std::abs(a), std::abs(numeric)});
            res.max_rel_err = std::max(res.max_rel_err, std::abs(a - numeric) / denom);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace tandem
