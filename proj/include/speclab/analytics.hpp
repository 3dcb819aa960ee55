// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form speedup model for speculative decoding under i.i.d. token
// acceptance, with a Monte Carlo check and grid sweeps.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace speclab {

/// E[tokens per cycle] = (1 - a^(g+1)) / (1 - a); g + 1 when a == 1.
/// Throws InvalidArgument for a outside [0, 1] or g == 0.
double expected_tokens(double alpha, std::size_t gamma);

/// expected_tokens / (1 + g c). Throws for c < 0.
double speedup(double alpha, std::size_t gamma, double cost_ratio);

struct SimulationResult {
    double mean = 0.0;
    double std_error = 0.0;
};

/// Per cycle: up to g Bernoulli(a) acceptances stopping at the first
/// rejection, plus one bonus token.
SimulationResult simulate_cycles(double alpha, std::size_t gamma, std::size_t n_cycles, std::uint64_t seed);

/// The a in [0, 1] with expected_tokens(a, g) == tau, by bisection. tau is
/// clamped to [1, g + 1].
double solve_alpha(double tau, std::size_t gamma);

struct SweepRow {
    double alpha = 0.0;
    std::size_t gamma = 0;
    double cost = 0.0;
    double expected_tokens = 0.0;
    double speedup = 0.0;
    bool optimal_gamma = false;  ///< best speedup in its (alpha, cost) group
};

/// Full grid. Within each (alpha, cost) group the smallest gamma reaching the
/// maximum speedup is flagged.
std::vector<SweepRow> sweep(const std::vector<double>& alphas, const std::vector<std::size_t>& gammas,
                            const std::vector<double>& costs);

/// Header "alpha,gamma,c,expected_tokens,speedup,optimal_gamma_flag".
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace speclab
