#pragma once

#include <catch2/catch_amalgamated.hpp>
#include <functional>
#include <vector>

#include "ounet/core/rng.hpp"
#include "ounet/nn/autodiff.hpp"

namespace testsupport {

using ounet::Tensor;
using ounet::nn::VarPtr;

inline Tensor<double> random_tensor(ounet::Shape shape, ounet::RngStream& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline double rel_error(double a, double b) {
    const double m = std::max(std::abs(a), std::abs(b));
    if (m < 1e-7) return 0.0;  // both effectively zero
    return std::abs(a - b) / m;
}

/// Seeds a random upstream gradient on the op output, runs backward once,
/// then checks every element of every input against central differences of
/// L = sum(seed * out).
inline void check_op_grads(const std::vector<VarPtr<double>>& inputs,
                           const std::function<VarPtr<double>()>& run_op, double tol = 1e-6,
                           double h = 1e-5) {
    ounet::RngStream rng(20240211);
    auto out = run_op();
    Tensor<double> seed = random_tensor(out->value.shape(), rng);
    ounet::nn::backward(out, seed);

    auto loss_value = [&]() {
        ounet::nn::NoGradGuard ng;
        auto o = run_op();
        double L = 0.0;
        for (std::int64_t i = 0; i < o->value.numel(); ++i) L += seed[i] * o->value[i];
        return L;
    };

    for (const auto& v : inputs) {
        if (!v->requires_grad) continue;
        REQUIRE(v->grad.numel() == v->value.numel());
        for (std::int64_t i = 0; i < v->value.numel(); ++i) {
            const double orig = v->value[i];
            v->value[i] = orig + h;
            const double lp = loss_value();
            v->value[i] = orig - h;
            const double lm = loss_value();
            v->value[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            INFO("input element " << i << ": analytic " << v->grad[i] << " vs fd " << fd);
            REQUIRE(rel_error(v->grad[i], fd) < tol);
        }
    }
}

}  // namespace testsupport
