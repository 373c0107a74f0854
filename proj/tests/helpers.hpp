#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <string>

#include "maxglavit/grad_check.hpp"
#include "maxglavit/ops.hpp"
#include "maxglavit/params.hpp"
#include "maxglavit/rng.hpp"
#include "maxglavit/tensor.hpp"

namespace mg_test {

using maxglavit::Dtype;
using maxglavit::Shape;
using maxglavit::Tensor;

inline Tensor random_tensor(Shape shape, Dtype dt, uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
    maxglavit::RngState rng(seed);
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set_value_at(i, rng.uniform(lo, hi));
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.value_at(i) - b.value_at(i)));
    return m;
}

inline bool bits_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double x = a.value_at(i), y = b.value_at(i);
        if (std::memcmp(&x, &y, sizeof(double)) != 0) return false;
    }
    return true;
}

template <class Fn>
void expect_throws_with(Fn fn, const std::string& substr) {
    bool threw = false;
    std::string msg;
    try {
        fn();
    } catch (const std::exception& e) {
        threw = true;
        msg = e.what();
    }
    EXPECT_TRUE(threw) << "expected an exception mentioning \"" << substr << "\"";
    if (threw)
        EXPECT_NE(msg.find(substr), std::string::npos)
            << "exception message \"" << msg << "\" lacks \"" << substr << "\"";
}

// Asserts reverse-mode gradients of f against central differences.
inline void expect_grad_ok(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double tol = 1e-6, double eps = 1e-4) {
    maxglavit::GradCheckOptions opts;
    opts.eps = eps;
    opts.tolerance = tol;
    auto report = maxglavit::grad_check(f, std::move(inputs), opts);
    EXPECT_TRUE(report.pass) << "max rel err " << report.max_rel_err << " at input "
                             << report.worst_input << " flat " << report.worst_flat
                             << " analytic " << report.worst_analytic << " numeric "
                             << report.worst_numeric;
}

// Sampled variant for whole modules, where checking every coordinate is slow.
inline void expect_grad_ok_sampled(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                   int64_t max_coords, double tol = 1e-6, double eps = 1e-4,
                                   uint64_t seed = 7) {
    maxglavit::GradCheckOptions opts;
    opts.eps = eps;
    opts.tolerance = tol;
    opts.max_coords = max_coords;
    opts.seed = seed;
    auto report = maxglavit::grad_check(f, std::move(inputs), opts);
    EXPECT_TRUE(report.pass) << "max rel err " << report.max_rel_err << " at input "
                             << report.worst_input << " flat " << report.worst_flat
                             << " analytic " << report.worst_analytic << " numeric "
                             << report.worst_numeric;
}

// Fixed random projection of y, so gradient errors cannot cancel the way they
// can under a plain sum.
inline Tensor weighted_sum(Tensor y, uint64_t seed = 11) {
    Tensor mask = random_tensor(y.shape(), y.dtype(), seed, 0.25, 1.75);
    return maxglavit::sum(maxglavit::mul(y, mask));
}

inline std::vector<Tensor> collect_params(const maxglavit::ParameterSet& ps) {
    std::vector<Tensor> out;
    for (const auto& name : ps.names()) out.push_back(ps.get(name));
    return out;
}

}  // namespace mg_test
