// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers: finite-difference gradient checks and random tensors.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "speclab/rng.hpp"
#include "speclab/tensor.hpp"

namespace speclab::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, float stddev = 1.0f, bool grad = false) {
    Tensor t = Tensor::randn(std::move(shape), rng, stddev, AllocCategory::Activation);
    t.set_requires_grad(grad);
    return t;
}

struct GradCheck {
    double rel_error = 0.0;
    double analytic_norm = 0.0;
};

// Compares autodiff gradients of a scalar-valued `f` against central
// differences. The error is measured norm-wise over each input.
inline GradCheck check_gradients(const std::function<Tensor(std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, double h = 1e-3) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor out = f(inputs);
    backward(out);
    GradCheck res;
    for (auto& t : inputs) {
        std::vector<float> analytic(t.grad().begin(), t.grad().end());
        std::vector<double> numeric(t.numel());
        {
            NoGradGuard ng;
            auto d = t.data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                const float keep = d[i];
                d[i] = static_cast<float>(keep + h);
                const double fp = f(inputs).item();
                d[i] = static_cast<float>(keep - h);
                const double fm = f(inputs).item();
                d[i] = keep;
                numeric[i] = (fp - fm) / (2 * h);
            }
        }
        double diff = 0, na = 0, nn = 0;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
            na += static_cast<double>(analytic[i]) * analytic[i];
            nn += numeric[i] * numeric[i];
        }
        const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-3});
        res.rel_error = std::max(res.rel_error, std::sqrt(diff) / denom);
        res.analytic_norm += std::sqrt(na);
    }
    return res;
}

// Contracts a tensor with fixed random weights so every output coordinate
// contributes to the checked scalar.
inline Tensor weighted_sum(const Tensor& x, const Tensor& w) { return sum(mul(x, w)); }

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - b[i]));
    return m;
}

}  // namespace speclab::testing
