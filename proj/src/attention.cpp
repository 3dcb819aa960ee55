// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/attention.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>

#include "speclab/error.hpp"
#include "speclab/kernels.hpp"

namespace speclab {

namespace {

struct HeadDims {
    std::size_t lq, lkv, heads, dk, dv;
};

HeadDims check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                   const char* what) {
    for (const Tensor* t : {&q, &k, &v})
        if (!t->defined() || t->rank() != 2)
            throw DimensionError(std::string(what) + ": q, k, v must be rank-2");
    if (heads == 0) throw InvalidArgument(std::string(what) + ": heads must be positive");
    if (k.dim(0) != v.dim(0))
        throw DimensionError(std::string(what) + ": k and v row counts differ");
    if (q.dim(1) != k.dim(1))
        throw DimensionError(std::string(what) + ": q and k widths differ " +
                             shape_str(q.shape()) + " vs " + shape_str(k.shape()));
    if (q.dim(1) % heads || v.dim(1) % heads)
        throw DimensionError(std::string(what) + ": widths not divisible by head count");
    return {q.dim(0), k.dim(0), heads, q.dim(1) / heads, v.dim(1) / heads};
}

inline double dot(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

void copy_head(std::span<const float> src, std::size_t rows, std::size_t width,
               std::size_t col0, std::size_t cols, float* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(src.data() + r * width + col0, cols, dst + r * cols);
}

}  // namespace

// ----- dense reference -----

Tensor dense_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              std::span<const std::uint8_t> mask, std::size_t heads) {
    const auto d = check_qkv(q, k, v, heads, "dense_masked_attention");
    if (mask.size() != d.lq * d.lkv)
        throw DimensionError("dense_masked_attention: mask has " + std::to_string(mask.size()) +
                             " cells, expected " + std::to_string(d.lq * d.lkv));
    for (std::size_t r = 0; r < d.lq; ++r) {
        const auto row = mask.subspan(r * d.lkv, d.lkv);
        if (std::none_of(row.begin(), row.end(), [](std::uint8_t m) { return m != 0; }))
            throw DegenerateRowError("dense_masked_attention: query row " + std::to_string(r) +
                                     " has no allowed key");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d.dk));
    Tensor out({d.lq, d.heads * d.dv});
    TrackedArray<float> qh(d.lq * d.dk, AllocCategory::Scratch);
    TrackedArray<float> kh(d.lkv * d.dk, AllocCategory::Scratch);
    TrackedArray<float> vh(d.lkv * d.dv, AllocCategory::Scratch);
    TrackedArray<float> logits(d.lq * d.lkv, AllocCategory::Scratch);
    TrackedArray<float> oh(d.lq * d.dv, AllocCategory::Scratch);
    auto o = out.data();
    for (std::size_t h = 0; h < d.heads; ++h) {
        copy_head(q.data(), d.lq, q.dim(1), h * d.dk, d.dk, qh.data());
        copy_head(k.data(), d.lkv, k.dim(1), h * d.dk, d.dk, kh.data());
        copy_head(v.data(), d.lkv, v.dim(1), h * d.dv, d.dv, vh.data());
        kernels::parallel::matmul_nt(qh.span(), kh.span(), logits.span(), {d.lq, d.dk, d.lkv});
        for (std::size_t r = 0; r < d.lq; ++r) {
            float* row = logits.data() + r * d.lkv;
            double mx = kMaskedLogit;
            for (std::size_t c = 0; c < d.lkv; ++c) {
                const double s = mask[r * d.lkv + c] ? row[c] * scale : kMaskedLogit;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (std::size_t c = 0; c < d.lkv; ++c) {
                const double s = mask[r * d.lkv + c] ? row[c] * scale : kMaskedLogit;
                z += std::exp(s - mx);
            }
            for (std::size_t c = 0; c < d.lkv; ++c) {
                const double s = mask[r * d.lkv + c] ? row[c] * scale : kMaskedLogit;
                row[c] = static_cast<float>(std::exp(s - mx) / z);
            }
        }
        kernels::parallel::matmul(logits.span(), vh.span(), oh.span(), {d.lq, d.lkv, d.dv});
        for (std::size_t r = 0; r < d.lq; ++r)
            std::copy_n(oh.data() + r * d.dv, d.dv, o.data() + r * d.heads * d.dv + h * d.dv);
    }
    return out;
}

Tensor dense_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& mask, std::size_t heads) {
    std::vector<std::uint8_t> m(mask.numel());
    auto md = mask.data();
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = md[i] != 0.0f;
    return dense_masked_attention(q, k, v, m, heads);
}

// ----- streaming kernels -----

namespace kernels {

namespace {

// Online-softmax pass over one (head, query block). Returns false when some
// row in the block had no admissible key.
bool forward_block(const StreamingProblem& p, const BlockMask& mask, std::size_t h,
                   std::size_t qb, std::span<float> out, std::span<double> lse, double* row_max,
                   double* row_sum, double* acc) {
    const std::size_t b = mask.params().block;
    const std::size_t r0 = qb * b, r1 = std::min(r0 + b, p.lq);
    const std::size_t wq = p.heads * p.dk, wv = p.heads * p.dv;
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.dk));
    for (std::size_t i = 0; i < r1 - r0; ++i) {
        row_max[i] = -INFINITY;
        row_sum[i] = 0.0;
        std::fill_n(acc + i * p.dv, p.dv, 0.0);
    }
    for (const BlockRef& blk : mask.row_blocks(qb)) {
        const std::size_t c0 = blk.index * b, c1 = std::min(c0 + b, p.lkv);
        for (std::size_t r = r0; r < r1; ++r) {
            const float* qr = p.q.data() + r * wq + h * p.dk;
            double* a = acc + (r - r0) * p.dv;
            for (std::size_t c = c0; c < c1; ++c) {
                if (!blk.full && !mask.allowed(r, c)) continue;
                const double s = dot(qr, p.k.data() + c * wq + h * p.dk, p.dk) * scale;
                double& m = row_max[r - r0];
                if (s > m) {
                    const double corr = std::exp(m - s);
                    row_sum[r - r0] *= corr;
                    for (std::size_t j = 0; j < p.dv; ++j) a[j] *= corr;
                    m = s;
                }
                const double e = std::exp(s - m);
                row_sum[r - r0] += e;
                const float* vc = p.v.data() + c * wv + h * p.dv;
                for (std::size_t j = 0; j < p.dv; ++j) a[j] += e * vc[j];
            }
        }
    }
    bool ok = true;
    for (std::size_t r = r0; r < r1; ++r) {
        const double l = row_sum[r - r0];
        if (l <= 0.0) {
            ok = false;
            continue;
        }
        const double* a = acc + (r - r0) * p.dv;
        float* o = out.data() + r * wv + h * p.dv;
        for (std::size_t j = 0; j < p.dv; ++j) o[j] = static_cast<float>(a[j] / l);
        lse[h * p.lq + r] = row_max[r - r0] + std::log(l);
    }
    return ok;
}

// D_r = dO_r . O_r for every row of one head.
void row_deltas(const StreamingProblem& p, std::size_t h, std::span<const float> out,
                std::span<const float> dout, double* delta) {
    const std::size_t wv = p.heads * p.dv;
    for (std::size_t r = 0; r < p.lq; ++r)
        delta[r] = dot(dout.data() + r * wv + h * p.dv, out.data() + r * wv + h * p.dv, p.dv);
}

void backward_query_block(const StreamingProblem& p, const BlockMask& mask, std::size_t h,
                          std::size_t qb, std::span<const double> lse, const double* delta,
                          std::span<const float> dout, std::span<float> dq, double* acc) {
    const std::size_t b = mask.params().block;
    const std::size_t r0 = qb * b, r1 = std::min(r0 + b, p.lq);
    const std::size_t wq = p.heads * p.dk, wv = p.heads * p.dv;
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.dk));
    for (std::size_t r = r0; r < r1; ++r) {
        std::fill_n(acc, p.dk, 0.0);
        const float* qr = p.q.data() + r * wq + h * p.dk;
        const float* gr = dout.data() + r * wv + h * p.dv;
        for (const BlockRef& blk : mask.row_blocks(qb)) {
            const std::size_t c0 = blk.index * b, c1 = std::min(c0 + b, p.lkv);
            for (std::size_t c = c0; c < c1; ++c) {
                if (!blk.full && !mask.allowed(r, c)) continue;
                const float* kc = p.k.data() + c * wq + h * p.dk;
                const double s = dot(qr, kc, p.dk) * scale;
                const double pr = std::exp(s - lse[h * p.lq + r]);
                const double dp = dot(gr, p.v.data() + c * wv + h * p.dv, p.dv);
                const double ds = pr * (dp - delta[r]) * scale;
                for (std::size_t j = 0; j < p.dk; ++j) acc[j] += ds * kc[j];
            }
        }
        float* g = dq.data() + r * wq + h * p.dk;
        for (std::size_t j = 0; j < p.dk; ++j) g[j] += static_cast<float>(acc[j]);
    }
}

void backward_key_block(const StreamingProblem& p, const BlockMask& mask, std::size_t h,
                        std::size_t kb, std::span<const double> lse, const double* delta,
                        std::span<const float> dout, std::span<float> dk, std::span<float> dv,
                        double* acc_k, double* acc_v) {
    const std::size_t b = mask.params().block;
    const std::size_t c0 = kb * b, c1 = std::min(c0 + b, p.lkv);
    const std::size_t wq = p.heads * p.dk, wv = p.heads * p.dv;
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.dk));
    for (std::size_t c = c0; c < c1; ++c) {
        std::fill_n(acc_k, p.dk, 0.0);
        std::fill_n(acc_v, p.dv, 0.0);
        const float* kc = p.k.data() + c * wq + h * p.dk;
        const float* vc = p.v.data() + c * wv + h * p.dv;
        for (const BlockRef& blk : mask.col_blocks(kb)) {
            const std::size_t r0 = blk.index * b, r1 = std::min(r0 + b, p.lq);
            for (std::size_t r = r0; r < r1; ++r) {
                if (!blk.full && !mask.allowed(r, c)) continue;
                const float* qr = p.q.data() + r * wq + h * p.dk;
                const float* gr = dout.data() + r * wv + h * p.dv;
                const double s = dot(qr, kc, p.dk) * scale;
                const double pr = std::exp(s - lse[h * p.lq + r]);
                for (std::size_t j = 0; j < p.dv; ++j) acc_v[j] += pr * gr[j];
                const double dp = dot(gr, vc, p.dv);
                const double ds = pr * (dp - delta[r]) * scale;
                for (std::size_t j = 0; j < p.dk; ++j) acc_k[j] += ds * qr[j];
            }
        }
        float* gk = dk.data() + c * wq + h * p.dk;
        float* gv = dv.data() + c * wv + h * p.dv;
        for (std::size_t j = 0; j < p.dk; ++j) gk[j] += static_cast<float>(acc_k[j]);
        for (std::size_t j = 0; j < p.dv; ++j) gv[j] += static_cast<float>(acc_v[j]);
    }
}

void check_problem(const StreamingProblem& p, const BlockMask& mask) {
    const auto& mp = mask.params();
    if (p.lq != mp.q_len || p.lkv != mp.kv_len())
        throw DimensionError("streaming_attention: mask covers [" + std::to_string(mp.q_len) +
                             "," + std::to_string(mp.kv_len()) + "] but inputs are [" +
                             std::to_string(p.lq) + "," + std::to_string(p.lkv) + "]");
}

[[noreturn]] void throw_degenerate() {
    throw DegenerateRowError("streaming_attention: a query row has every key block skipped");
}

}  // namespace

namespace serial {

void streaming_attention_forward(const StreamingProblem& p, const BlockMask& mask,
                                 std::span<float> out, std::span<double> lse) {
    check_problem(p, mask);
    const std::size_t b = mask.params().block;
    TrackedArray<double> stats(2 * b + b * p.dv, AllocCategory::Scratch);
    bool ok = true;
    for (std::size_t h = 0; h < p.heads; ++h)
        for (std::size_t qb = 0; qb < mask.query_blocks(); ++qb)
            ok &= forward_block(p, mask, h, qb, out, lse, stats.data(), stats.data() + b,
                                stats.data() + 2 * b);
    if (!ok) throw_degenerate();
}

void streaming_attention_backward(const StreamingProblem& p, const BlockMask& mask,
                                  std::span<const float> out, std::span<const double> lse,
                                  std::span<const float> dout, std::span<float> dq,
                                  std::span<float> dk, std::span<float> dv) {
    check_problem(p, mask);
    TrackedArray<double> delta(p.lq, AllocCategory::Scratch);
    TrackedArray<double> acc(2 * p.dk + p.dv, AllocCategory::Scratch);
    for (std::size_t h = 0; h < p.heads; ++h) {
        row_deltas(p, h, out, dout, delta.data());
        if (!dq.empty())
            for (std::size_t qb = 0; qb < mask.query_blocks(); ++qb)
                backward_query_block(p, mask, h, qb, lse, delta.data(), dout, dq, acc.data());
        if (!dk.empty())
            for (std::size_t kb = 0; kb < mask.key_blocks(); ++kb)
                backward_key_block(p, mask, h, kb, lse, delta.data(), dout, dk, dv,
                                   acc.data() + p.dk, acc.data() + 2 * p.dk);
    }
}

}  // namespace serial

namespace parallel {

void streaming_attention_forward(const StreamingProblem& p, const BlockMask& mask,
                                 std::span<float> out, std::span<double> lse) {
    check_problem(p, mask);
    const std::size_t b = mask.params().block;
    const std::size_t qbs = mask.query_blocks();
    const auto tasks = static_cast<std::ptrdiff_t>(p.heads * qbs);
    std::atomic<bool> ok{true};
#pragma omp parallel if (tasks > 1)
    {
        TrackedArray<double> stats(2 * b + b * p.dv, AllocCategory::Scratch);
#pragma omp for schedule(dynamic)
        for (std::ptrdiff_t t = 0; t < tasks; ++t) {
            const auto h = static_cast<std::size_t>(t) / qbs, qb = static_cast<std::size_t>(t) % qbs;
            if (!forward_block(p, mask, h, qb, out, lse, stats.data(), stats.data() + b,
                               stats.data() + 2 * b))
                ok.store(false, std::memory_order_relaxed);
        }
    }
    if (!ok.load()) throw_degenerate();
}

void streaming_attention_backward(const StreamingProblem& p, const BlockMask& mask,
                                  std::span<const float> out, std::span<const double> lse,
                                  std::span<const float> dout, std::span<float> dq,
                                  std::span<float> dk, std::span<float> dv) {
    check_problem(p, mask);
    TrackedArray<double> delta(p.heads * p.lq, AllocCategory::Scratch);
    for (std::size_t h = 0; h < p.heads; ++h) row_deltas(p, h, out, dout, delta.data() + h * p.lq);
    const std::size_t qbs = mask.query_blocks(), kbs = mask.key_blocks();
    const auto q_tasks = static_cast<std::ptrdiff_t>(p.heads * qbs);
    const auto k_tasks = static_cast<std::ptrdiff_t>(p.heads * kbs);
#pragma omp parallel
    {
        TrackedArray<double> acc(2 * p.dk + p.dv, AllocCategory::Scratch);
        if (!dq.empty()) {
#pragma omp for schedule(dynamic)
            for (std::ptrdiff_t t = 0; t < q_tasks; ++t) {
                const auto h = static_cast<std::size_t>(t) / qbs;
                backward_query_block(p, mask, h, static_cast<std::size_t>(t) % qbs, lse,
                                     delta.data() + h * p.lq, dout, dq, acc.data());
            }
        }
        if (!dk.empty()) {
#pragma omp for schedule(dynamic)
            for (std::ptrdiff_t t = 0; t < k_tasks; ++t) {
                const auto h = static_cast<std::size_t>(t) / kbs;
                backward_key_block(p, mask, h, static_cast<std::size_t>(t) % kbs, lse,
                                   delta.data() + h * p.lq, dout, dk, dv, acc.data() + p.dk,
                                   acc.data() + 2 * p.dk);
            }
        }
    }
}

}  // namespace parallel

}  // namespace kernels

// ----- differentiable streaming op -----

Tensor streaming_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const BlockMask& mask, std::size_t heads) {
    const auto d = check_qkv(q, k, v, heads, "streaming_attention");
    const kernels::StreamingProblem prob{q.data(), k.data(), v.data(), d.lq, d.lkv,
                                         d.heads, d.dk, d.dv};
    Tensor out({d.lq, d.heads * d.dv});
    auto lse = std::make_shared<TrackedArray<double>>(d.heads * d.lq, AllocCategory::Activation);
    kernels::parallel::streaming_attention_forward(prob, mask, out.data(), lse->span());
    if (!grad_enabled() || !(q.requires_grad() || k.requires_grad() || v.requires_grad())) return out;

    // The backward recomputes probabilities from q, k and the saved
    // log-sum-exp; the mask is copied so its lifetime is the graph's.
    auto saved_mask = std::make_shared<BlockMask>(mask);
    record(out, {q, k, v}, [q, k, v, d, lse, saved_mask](Tensor& o) mutable {
        const kernels::StreamingProblem prob{q.data(), k.data(), v.data(), d.lq, d.lkv,
                                             d.heads, d.dk, d.dv};
        // dk and dv are produced together by the key-block pass.
        const bool need_kv = k.requires_grad() || v.requires_grad();
        TrackedArray<float> dk_tmp, dv_tmp;
        std::span<float> dk_span, dv_span;
        if (need_kv) {
            if (k.requires_grad()) dk_span = k.grad_accumulator();
            else {
                dk_tmp = TrackedArray<float>(k.numel(), AllocCategory::Scratch);
                dk_span = dk_tmp.span();
            }
            if (v.requires_grad()) dv_span = v.grad_accumulator();
            else {
                dv_tmp = TrackedArray<float>(v.numel(), AllocCategory::Scratch);
                dv_span = dv_tmp.span();
            }
        }
        std::span<float> dq_span = q.requires_grad() ? q.grad_accumulator() : std::span<float>{};
        kernels::parallel::streaming_attention_backward(prob, *saved_mask, std::as_const(o).data(),
                                                        lse->span(), o.grad(), dq_span, dk_span,
                                                        dv_span);
    });
    return out;
}

// ----- TTT -----

Tensor ttt_attention_step(TTTState& state, const Tensor& q, const Tensor& new_k,
                          const Tensor& new_v, const BlockMask& mask, std::size_t heads) {
    const std::size_t step = mask.params().step;
    if (step != state.completed_steps())
        throw InternalError("ttt_attention_step: mask step " + std::to_string(step) +
                            " but state holds " + std::to_string(state.completed_steps()) +
                            " completed steps");
    if (state.empty()) {
        state.prefix_k = new_k;
        state.prefix_v = new_v;
    } else {
        if (new_k.shape() != state.prefix_k.shape() || new_v.shape() != state.prefix_v.shape())
            throw DimensionError("ttt_attention_step: step tensors must match prefix shape");
        state.step_k.push_back(new_k);
        state.step_v.push_back(new_v);
    }
    if (state.step_k.empty()) return streaming_attention(q, state.prefix_k, state.prefix_v, mask, heads);
    std::vector<Tensor> ks{state.prefix_k}, vs{state.prefix_v};
    ks.insert(ks.end(), state.step_k.begin(), state.step_k.end());
    vs.insert(vs.end(), state.step_v.begin(), state.step_v.end());
    return streaming_attention(q, concat_rows(ks), concat_rows(vs), mask, heads);
}

Tensor ttt_attention_reference(const Tensor& q, const Tensor& prefix_k, const Tensor& prefix_v,
                               std::span<const Tensor> step_k, std::span<const Tensor> step_v,
                               std::size_t seq_len, std::size_t heads) {
    const auto d = check_qkv(q, prefix_k, prefix_v, heads, "ttt_attention_reference");
    if (step_k.size() != step_v.size())
        throw DimensionError("ttt_attention_reference: step key/value counts differ");
    if (d.lkv != d.lq) throw DimensionError("ttt_attention_reference: prefix must have Lq rows");
    if (seq_len == 0 || seq_len > d.lq) throw InvalidArgument("ttt_attention_reference: bad T");
    const double scale = 1.0 / std::sqrt(static_cast<double>(d.dk));
    const std::size_t wq = heads * d.dk, wv = heads * d.dv;
    Tensor out({d.lq, wv});
    auto o = out.data();
    std::vector<double> logits;
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < d.lq; ++t) {
            const float* qt = q.data().data() + t * wq + h * d.dk;
            // S <- q_t K_train^T / sqrt(d_k) over admissible prefix keys
            logits.clear();
            const std::size_t n_prefix = std::min(t + 1, seq_len);
            for (std::size_t j = 0; j < n_prefix; ++j)
                logits.push_back(dot(qt, prefix_k.data().data() + j * wq + h * d.dk, d.dk) * scale);
            // S <- concat(S, q_t . k_i / sqrt(d_k)) for each cached step
            const bool real_row = t < seq_len;
            if (real_row)
                for (const Tensor& ks : step_k)
                    logits.push_back(dot(qt, ks.data().data() + t * wq + h * d.dk, d.dk) * scale);
            double mx = -INFINITY;
            for (double s : logits) mx = std::max(mx, s);
            double z = 0.0;
            for (double s : logits) z += std::exp(s - mx);
            std::vector<double> acc(d.dv, 0.0);
            for (std::size_t j = 0; j < n_prefix; ++j) {
                const double a = std::exp(logits[j] - mx) / z;
                const float* vj = prefix_v.data().data() + j * wv + h * d.dv;
                for (std::size_t c = 0; c < d.dv; ++c) acc[c] += a * vj[c];
            }
            if (real_row)
                for (std::size_t i = 0; i < step_v.size(); ++i) {
                    const double a = std::exp(logits[n_prefix + i] - mx) / z;
                    const float* vi = step_v[i].data().data() + t * wv + h * d.dv;
                    for (std::size_t c = 0; c < d.dv; ++c) acc[c] += a * vi[c];
                }
            for (std::size_t c = 0; c < d.dv; ++c)
                o[t * wv + h * d.dv + c] = static_cast<float>(acc[c]);
        }
    }
    return out;
}

}  // namespace speclab
