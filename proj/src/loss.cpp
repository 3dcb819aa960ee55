// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/loss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <unordered_set>

#include "speclab/error.hpp"

namespace speclab {

namespace {

void check_view(std::span<const float> z, std::span<const float> p, const LossView& v) {
    if (v.vocab < 2) throw InvalidArgument("loss: vocabulary must have at least 2 entries");
    if (z.size() != v.rows * v.vocab || p.size() != z.size())
        throw DimensionError("loss: logits/target sizes do not match [" + std::to_string(v.rows) +
                             "," + std::to_string(v.vocab) + "]");
    if (v.mask.size() != v.rows) throw DimensionError("loss: mask length differs from row count");
    if (!v.row_weights.empty() && v.row_weights.size() != v.rows)
        throw DimensionError("loss: row weight count differs from row count");
    if (v.active_rows() == 0) throw InvalidArgument("loss: no active rows");
}

// Fills `e` with exp(z - max) and returns (max, sum of e).
std::pair<double, double> row_exp(const float* z, std::size_t n, double* e) {
    double m = z[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, double(z[i]));
    double l = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        e[i] = std::exp(double(z[i]) - m);
        l += e[i];
    }
    return {m, l};
}

double row_loss(const float* z, const float* p, std::size_t n, double* e) {
    const auto [m, l] = row_exp(z, n, e);
    const double lse = m + std::log(l);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += double(p[i]) * (double(z[i]) - lse);
    return -acc;
}

}  // namespace

std::size_t LossView::active_rows() const {
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    return n;
}

double loss_forward(std::span<const float> z, std::span<const float> p, const LossView& view) {
    check_view(z, p, view);
    TrackedArray<double> e(view.vocab, AllocCategory::Scratch);
    double total = 0.0;
    for (std::size_t r = 0; r < view.rows; ++r) {
        if (!view.mask[r]) continue;
        total += view.weight(r) *
                 row_loss(z.data() + r * view.vocab, p.data() + r * view.vocab, view.vocab, e.data());
    }
    return total / double(view.active_rows());
}

void loss_backward_inplace(std::span<float> z, std::span<const float> p, const LossView& view,
                           double upstream) {
    check_view(z, p, view);
    const std::size_t v = view.vocab;
    const double inv_count = 1.0 / double(view.active_rows());
    const auto rows = static_cast<std::ptrdiff_t>(view.rows);
#pragma omp parallel if (view.rows * v > (1u << 16))
    {
        TrackedArray<double> e(v, AllocCategory::Scratch);
#pragma omp for schedule(static)
        for (std::ptrdiff_t ri = 0; ri < rows; ++ri) {
            const auto r = static_cast<std::size_t>(ri);
            float* zr = z.data() + r * v;
            if (!view.mask[r]) {
                std::fill_n(zr, v, 0.0f);
                continue;
            }
            const float* pr = p.data() + r * v;
            const double g = upstream * view.weight(r) * inv_count;
            const auto [m, l] = row_exp(zr, v, e.data());
            double s = 0.0;
            for (std::size_t i = 0; i < v; ++i) s += double(pr[i]) * g;
            for (std::size_t i = 0; i < v; ++i) {
                const double pi = e[i] / l;
                zr[i] = static_cast<float>(pi * s - double(pr[i]) * g);
            }
        }
    }
}

std::vector<float> loss_backward_reference(std::span<const float> z, std::span<const float> p,
                                           const LossView& view, double upstream) {
    check_view(z, p, view);
    const std::size_t v = view.vocab;
    const double inv_count = 1.0 / double(view.active_rows());
    std::vector<double> pi(z.size(), 0.0);
    for (std::size_t r = 0; r < view.rows; ++r) {
        const float* zr = z.data() + r * v;
        double m = zr[0];
        for (std::size_t i = 1; i < v; ++i) m = std::max(m, double(zr[i]));
        double l = 0.0;
        for (std::size_t i = 0; i < v; ++i) l += std::exp(double(zr[i]) - m);
        for (std::size_t i = 0; i < v; ++i) pi[r * v + i] = std::exp(double(zr[i]) - m) / l;
    }
    std::vector<float> grad(z.size(), 0.0f);
    for (std::size_t r = 0; r < view.rows; ++r) {
        if (!view.mask[r]) continue;
        const double g = upstream * view.weight(r) * inv_count;
        double s = 0.0;
        for (std::size_t i = 0; i < v; ++i) s += double(p[r * v + i]) * g;
        for (std::size_t i = 0; i < v; ++i)
            grad[r * v + i] = static_cast<float>(pi[r * v + i] * s - double(p[r * v + i]) * g);
    }
    return grad;
}

Tensor masked_soft_ce(const Tensor& logits, const Tensor& target, std::span<const std::uint8_t> mask,
                      std::span<const float> row_weights) {
    if (logits.rank() != 2 || target.shape() != logits.shape())
        throw DimensionError("masked_soft_ce: logits " + shape_str(logits.shape()) + " vs target " +
                             shape_str(target.shape()));
    auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
    auto w = std::make_shared<std::vector<float>>(row_weights.begin(), row_weights.end());
    const LossView view{logits.rows(), logits.cols(), *m, *w};
    Tensor out = Tensor::scalar(static_cast<float>(loss_forward(logits.data(), target.data(), view)));
    Tensor z = logits;
    record(out, {logits}, [z, target, m, w](Tensor& o) mutable {
        const LossView view{z.rows(), z.cols(), *m, *w};
        loss_backward_inplace(z.data(), target.data(), view, o.grad()[0]);
        z.donate_data_to_grad();
    });
    return out;
}

Tensor topk_distill_target(const Tensor& target_logits, std::span<const std::uint32_t> draft_to_target) {
    if (draft_to_target.empty()) throw InvalidArgument("topk_distill_target: empty vocabulary map");
    if (target_logits.rank() != 2) throw DimensionError("topk_distill_target: logits must be rank-2");
    const std::size_t n = target_logits.rows(), vt = target_logits.cols(), vd = draft_to_target.size();
    std::unordered_set<std::uint32_t> seen;
    for (auto id : draft_to_target) {
        if (id >= vt) throw IndexError("topk_distill_target: map entry " + std::to_string(id) + " >= " + std::to_string(vt));
        if (!seen.insert(id).second) throw InvalidArgument("topk_distill_target: map is not injective");
    }
    Tensor out({n, vd});
    auto o = out.data();
    auto z = target_logits.data();
    TrackedArray<double> e(vt, AllocCategory::Scratch);
    for (std::size_t r = 0; r < n; ++r) {
        row_exp(z.data() + r * vt, vt, e.data());
        double kept = 0.0;
        for (auto id : draft_to_target) kept += e[id];
        for (std::size_t i = 0; i < vd; ++i) o[r * vd + i] = static_cast<float>(e[draft_to_target[i]] / kept);
    }
    return out;
}

}  // namespace speclab
