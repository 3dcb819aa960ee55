// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Masked soft-label cross-entropy between draft logits z and a target
// distribution p, with a backward that overwrites z with dL/dz.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "speclab/tensor.hpp"

namespace speclab {

/// Row-major [rows, vocab] logits and targets plus per-row selection.
/// `row_weights` is optional; when empty every row has weight 1.
struct LossView {
    std::size_t rows = 0;
    std::size_t vocab = 0;
    std::span<const std::uint8_t> mask;
    std::span<const float> row_weights;

    std::size_t active_rows() const;
    double weight(std::size_t r) const { return row_weights.empty() ? 1.0 : row_weights[r]; }
};

/// L = -(1/active) * sum_r w_r * sum_v p[r,v] * log_softmax(z[r])_v.
/// Rows with mask false contribute exactly 0. Throws InvalidArgument when
/// no row is active.
double loss_forward(std::span<const float> z, std::span<const float> p, const LossView& view);

/// Overwrites `z` with upstream * dL/dz. Per row, with g = upstream * w_r /
/// active and s = sum_v p*g, each entry becomes pi*s - p*g; inactive rows are
/// zeroed. Holds one row of scratch per thread.
void loss_backward_inplace(std::span<float> z, std::span<const float> p, const LossView& view,
                           double upstream = 1.0);

/// Out-of-place form of the same gradient, materialising softmax(z).
std::vector<float> loss_backward_reference(std::span<const float> z, std::span<const float> p,
                                           const LossView& view, double upstream = 1.0);

/// Differentiable scalar loss. The backward runs in place inside the
/// logits' value buffer and then hands that buffer to the logits' gradient
/// slot, so `logits` must not be read by any other op after this one.
Tensor masked_soft_ce(const Tensor& logits, const Tensor& target,
                      std::span<const std::uint8_t> mask, std::span<const float> row_weights = {});

/// softmax(target_logits) restricted to `draft_to_target` and renormalised.
/// Entry i of the map is the target id that draft id i stands for.
Tensor topk_distill_target(const Tensor& target_logits, std::span<const std::uint32_t> draft_to_target);

}  // namespace speclab
