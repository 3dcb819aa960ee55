// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/analytics.hpp"

#include <cmath>

#include <fmt/format.h>

#include "speclab/error.hpp"
#include "speclab/rng.hpp"

namespace speclab {

namespace {

void check(double alpha, std::size_t gamma) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument(fmt::format("alpha {} outside [0, 1]", alpha));
    if (gamma == 0) throw InvalidArgument("gamma must be at least 1");
}

}  // namespace

double expected_tokens(double alpha, std::size_t gamma) {
    check(alpha, gamma);
    if (std::fabs(1.0 - alpha) < 1e-12) return double(gamma + 1);
    return (1.0 - std::pow(alpha, double(gamma + 1))) / (1.0 - alpha);
}

double speedup(double alpha, std::size_t gamma, double cost_ratio) {
    if (!(cost_ratio >= 0.0)) throw InvalidArgument(fmt::format("cost ratio {} is negative", cost_ratio));
    return expected_tokens(alpha, gamma) / (1.0 + double(gamma) * cost_ratio);
}

SimulationResult simulate_cycles(double alpha, std::size_t gamma, std::size_t n_cycles, std::uint64_t seed) {
    check(alpha, gamma);
    if (n_cycles == 0) throw InvalidArgument("simulate_cycles: need at least one cycle");
    Rng rng(seed);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t c = 0; c < n_cycles; ++c) {
        std::size_t emitted = 1;
        for (std::size_t i = 0; i < gamma && rng.bernoulli(alpha); ++i) ++emitted;
        sum += double(emitted);
        sum_sq += double(emitted) * double(emitted);
    }
    const double n = double(n_cycles);
    const double mean = sum / n;
    const double var = n > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1)) : 0.0;
    return {mean, std::sqrt(var / n)};
}

double solve_alpha(double tau, std::size_t gamma) {
    check(0.0, gamma);
    if (tau <= 1.0) return 0.0;
    if (tau >= double(gamma + 1)) return 1.0;
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
        const double mid = 0.5 * (lo + hi);
        (expected_tokens(mid, gamma) < tau ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

std::vector<SweepRow> sweep(const std::vector<double>& alphas, const std::vector<std::size_t>& gammas,
                            const std::vector<double>& costs) {
    std::vector<SweepRow> rows;
    for (double a : alphas)
        for (double c : costs) {
            const std::size_t first = rows.size();
            std::size_t best = first;
            for (std::size_t g : gammas) {
                rows.push_back({a, g, c, expected_tokens(a, g), speedup(a, g, c), false});
                const SweepRow& r = rows.back();
                if (r.speedup > rows[best].speedup ||
                    (r.speedup == rows[best].speedup && r.gamma < rows[best].gamma))
                    best = rows.size() - 1;
            }
            if (rows.size() > first) rows[best].optimal_gamma = true;
        }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "alpha,gamma,c,expected_tokens,speedup,optimal_gamma_flag\n";
    for (const auto& r : rows)
        out += fmt::format("{:.6f},{},{:.6f},{:.6f},{:.6f},{}\n", r.alpha, r.gamma, r.cost, r.expected_tokens,
                           r.speedup, r.optimal_gamma ? 1 : 0);
    return out;
}

}  // namespace speclab
