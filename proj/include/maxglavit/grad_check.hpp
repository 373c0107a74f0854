#pragma once

// Central-difference gradient verification.
//
// Compares reverse-mode gradients against (f(x+h) - f(x-h)) / 2h coordinate
// by coordinate. Inputs must be real64: float rounding drowns the h^2
// truncation error long before the tolerances used here.

#include <functional>

#include "autograd.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace maxglavit {

struct GradCheckOptions {
    double eps = 1e-4;
    double tolerance = 1e-6;
    int64_t max_coords = 0;  // 0 = every coordinate
    uint64_t seed = 0;       // coordinate sampling stream
    std::vector<std::string> names;  // optional, parallel to inputs
};

struct GradCheckReport {
    bool pass = true;
    double max_rel_err = 0.0;
    int64_t checked = 0;
    size_t worst_input = 0;
    int64_t worst_flat = -1;
    std::string worst_name;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// f must be a pure function of `inputs` (and constants). Their current values
// are perturbed in place and restored.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                  GradCheckOptions opts = {}) {
    check(!inputs.empty(), "grad_check: no inputs to check");
    for (size_t i = 0; i < inputs.size(); ++i) {
        check(inputs[i].defined(), "grad_check: undefined input");
        check(inputs[i].dtype() == Dtype::real64,
              "grad_check: inputs must be real64, input " + std::to_string(i) + " is " +
                  dtype_name(inputs[i].dtype()));
        inputs[i].set_requires_grad(true);
    }

    auto eval = [&]() {
        Tensor y = f();
        check(y.defined() && y.numel() == 1,
              "grad_check: f must return a scalar, got shape " + shape_str(y.shape()));
        return y.value_at(0);
    };

    double v1 = eval();
    double v2 = eval();
    if (!(v1 == v2))
        throw std::runtime_error("grad_check: f is not deterministic (" + std::to_string(v1) +
                                 " vs " + std::to_string(v2) + ")");

    std::vector<std::vector<double>> analytic(inputs.size());
    {
        RecordGuard guard;
        Tensor loss = f();
        backward(loss);
        for (size_t i = 0; i < inputs.size(); ++i) analytic[i] = inputs[i].grad().to_vector();
        for (Tensor& t : inputs) t.zero_grad();
    }

    std::vector<std::pair<size_t, int64_t>> coords;
    int64_t total = 0;
    for (const Tensor& t : inputs) total += t.numel();
    if (opts.max_coords > 0 && opts.max_coords < total) {
        RngState rng(opts.seed);
        std::vector<int64_t> picks;
        // sample distinct flat offsets into the concatenation of all inputs
        std::vector<bool> taken(size_t(total), false);
        while (int64_t(picks.size()) < opts.max_coords) {
            int64_t p = rng.below(total);
            if (taken[size_t(p)]) continue;
            taken[size_t(p)] = true;
            picks.push_back(p);
        }
        for (int64_t p : picks) {
            size_t idx = 0;
            int64_t off = p;
            while (off >= inputs[idx].numel()) {
                off -= inputs[idx].numel();
                ++idx;
            }
            coords.emplace_back(idx, off);
        }
    } else {
        for (size_t i = 0; i < inputs.size(); ++i)
            for (int64_t j = 0; j < inputs[i].numel(); ++j) coords.emplace_back(i, j);
    }

    GradCheckReport report;
    for (auto [i, j] : coords) {
        double saved = inputs[i].value_at(j);
        inputs[i].set_value_at(j, saved + opts.eps);
        double up = eval();
        inputs[i].set_value_at(j, saved - opts.eps);
        double down = eval();
        inputs[i].set_value_at(j, saved);
        double numeric = (up - down) / (2.0 * opts.eps);
        double a = analytic[i][size_t(j)];
        double rel = std::abs(a - numeric) /
                     std::max({std::abs(a), std::abs(numeric), 1e-8});
        ++report.checked;
        if (rel > report.max_rel_err || report.worst_flat < 0) {
            report.max_rel_err = rel;
            report.worst_input = i;
            report.worst_flat = j;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
            report.worst_name = i < opts.names.size() ? opts.names[i] : std::to_string(i);
        }
    }
    report.pass = report.max_rel_err <= opts.tolerance;
    return report;
}

}  // namespace maxglavit
