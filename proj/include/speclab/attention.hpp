// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Three attention routes that must agree:
//   * dense_masked_attention  - materialises the [Lq, Lkv] logits (oracle)
//   * streaming_attention     - online softmax over BlockMask blocks, never
//                               holds more than one B x B logit tile
//   * ttt_attention_reference - the per-row prefix + cached-diagonal loop
//
// Multi-head inputs pack heads side by side along the trailing axis:
// q and k are [L, heads * d_k], v is [L, heads * d_v].

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "speclab/blockmask.hpp"
#include "speclab/tensor.hpp"

namespace speclab {

/// Value substituted for disallowed logits in the dense reference.
inline constexpr double kMaskedLogit = -1e30;

/// softmax(q k^T / sqrt(d_k) with disallowed logits at -1e30) v.
/// `mask` is row-major [Lq, Lkv], nonzero = allowed. Not differentiable.
Tensor dense_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              std::span<const std::uint8_t> mask, std::size_t heads = 1);
/// Same, taking the {0,1} tensor produced by expand_dense.
Tensor dense_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& mask, std::size_t heads = 1);

/// Block-sparse streaming attention; differentiable in q, k and v.
/// Skipped blocks are never read; partial blocks re-evaluate the predicate.
Tensor streaming_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const BlockMask& mask, std::size_t heads = 1);

namespace kernels {

/// Forward pass of streaming attention on raw buffers. Writes `out`
/// [Lq, heads*dv] and the per-row log-sum-exp `lse` [heads * Lq].
struct StreamingProblem {
    std::span<const float> q, k, v;
    std::size_t lq, lkv, heads, dk, dv;
};

namespace serial {
void streaming_attention_forward(const StreamingProblem& p, const BlockMask& mask,
                                 std::span<float> out, std::span<double> lse);
void streaming_attention_backward(const StreamingProblem& p, const BlockMask& mask,
                                  std::span<const float> out, std::span<const double> lse,
                                  std::span<const float> dout, std::span<float> dq,
                                  std::span<float> dk, std::span<float> dv);
}  // namespace serial

namespace parallel {
void streaming_attention_forward(const StreamingProblem& p, const BlockMask& mask,
                                 std::span<float> out, std::span<double> lse);
void streaming_attention_backward(const StreamingProblem& p, const BlockMask& mask,
                                  std::span<const float> out, std::span<const double> lse,
                                  std::span<const float> dout, std::span<float> dq,
                                  std::span<float> dk, std::span<float> dv);
}  // namespace parallel

}  // namespace kernels

/// KV cache of one unrolled training step sequence.
///
/// `prefix_k`/`prefix_v` are the keys and values of the first (step-0) pass
/// over the real sequence; `step_k`/`step_v` hold one tensor per later step.
struct TTTState {
    Tensor prefix_k;
    Tensor prefix_v;
    std::vector<Tensor> step_k;
    std::vector<Tensor> step_v;

    bool empty() const { return !prefix_k.defined(); }
    std::size_t completed_steps() const { return empty() ? 0 : 1 + step_k.size(); }
};

/// One unroll step. `new_k`/`new_v` are the current step's keys and values;
/// they become the prefix on step 0 and are appended as a diagonal segment
/// afterwards, so the query sees its own key like ordinary self-attention.
/// Requires mask.params().step == state.completed_steps() on entry.
Tensor ttt_attention_step(TTTState& state, const Tensor& q, const Tensor& new_k,
                          const Tensor& new_v, const BlockMask& mask, std::size_t heads = 1);

/// Per-row loop form: logits against the causal prefix keys (first
/// `seq_len` rows only), then one extra logit q_t . k_i[t] per cached step.
Tensor ttt_attention_reference(const Tensor& q, const Tensor& prefix_k, const Tensor& prefix_v,
                               std::span<const Tensor> step_k, std::span<const Tensor> step_v,
                               std::size_t seq_len, std::size_t heads = 1);

}  // namespace speclab
