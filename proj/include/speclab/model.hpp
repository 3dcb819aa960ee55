// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale target transformer and single-layer feature-level draft head.
//
// Both models are pre-norm decoders with learned absolute positions. The
// attention core is supplied by the caller through AttnFn so the same weights
// run under the streaming block-sparse kernel during training and under an
// explicit dense mask (causal or tree-shaped) at inference.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "speclab/attention.hpp"
#include "speclab/rng.hpp"
#include "speclab/tensor.hpp"

namespace speclab {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// (layer, q, k, v) -> attention output before the output projection.
using AttnFn = std::function<Tensor(std::size_t layer, const Tensor& q, const Tensor& k, const Tensor& v)>;

// ----- feed-forward variants -----

enum class FfnVariant : std::uint8_t { Dense = 0, MoESameParams = 1, MoESameFlops = 2, MoESharedExpert = 3 };

const char* to_string(FfnVariant v);
FfnVariant parse_ffn_variant(const std::string& s);

struct FfnConfig {
    FfnVariant variant = FfnVariant::Dense;
    std::size_t d = 64;
    std::size_t inter = 128;   ///< dense intermediate width
    std::size_t experts = 2;   ///< E, MoE variants only
    std::size_t top_r = 1;     ///< routed experts per token
    /// Throws InvalidArgument on E < 2 for MoE variants or a width that does
    /// not split evenly across experts.
    void validate() const;
};

/// Parameter and per-token multiply counts. Router figures are kept apart
/// from the expert figures so budget rules can be checked on either.
struct FfnCost {
    std::size_t params = 0;         ///< expert + shared-expert weights
    std::size_t router_params = 0;
    std::size_t flops = 0;          ///< multiplies per token through experts
    std::size_t router_flops = 0;   ///< router logits plus gate scaling
};

/// Concrete layout an FfnConfig resolves to.
struct FfnLayout {
    std::size_t d = 0;
    std::vector<std::size_t> expert_inter;  ///< one entry per routed expert
    std::size_t shared_inter = 0;           ///< 0 = no shared expert
    bool routed = false;
    std::size_t top_r = 1;

    static FfnLayout from_config(const FfnConfig& c);
};

class FeedForward {
public:
    FeedForward() = default;
    FeedForward(const FfnLayout& layout, Rng& rng, const std::string& prefix);

    /// x [n, d] -> [n, d]. Routed layouts pick the top_r router
    /// probabilities per token (lowest index wins ties) and renormalise
    /// their weights over the selection.
    Tensor forward(const Tensor& x) const;

    /// Expert index chosen first for each row of x; empty if unrouted.
    std::vector<std::uint32_t> route(const Tensor& x) const;

    FfnCost cost() const;
    const FfnLayout& layout() const { return layout_; }
    void collect(NamedTensors& out) const;

    std::vector<Tensor> up, down;  ///< per routed expert
    Tensor shared_up, shared_down;
    Tensor router;                 ///< [d, E]

private:
    std::string prefix_;
    FfnLayout layout_;
};

// ----- shared decoder block -----

struct AttentionWeights {
    Tensor wq, wk, wv, wo;  ///< [d, d] each
    void collect(NamedTensors& out, const std::string& prefix) const;
};

struct BlockCost {
    std::size_t attn_params = 0;
    std::size_t norm_params = 0;
    FfnCost ffn;
};

// ----- target -----

struct TargetConfig {
    std::size_t vocab = 256;
    std::size_t layers = 4;
    std::size_t d = 64;
    std::size_t heads = 2;
    std::size_t ffn_inter = 128;
    std::size_t max_pos = 128;

    /// Low, middle and high tap layers: {0, L/2, L-1}.
    std::array<std::size_t, 3> taps() const { return {0, layers / 2, layers - 1}; }
    void validate() const;
};

struct TargetOutput {
    Tensor logits;  ///< [n, vocab]
    Tensor fused;   ///< [n, 3d]
};

class TargetModel {
public:
    TargetModel() = default;
    TargetModel(const TargetConfig& cfg, Rng& rng);

    const TargetConfig& config() const { return cfg_; }

    /// Full forward. `positions` gives each row's position id.
    TargetOutput forward(std::span<const std::uint32_t> tokens, std::span<const std::uint32_t> positions,
                         const AttnFn& attn) const;
    /// Causal forward through the dense kernel; positions 0..n-1.
    TargetOutput forward_causal(std::span<const std::uint32_t> tokens) const;

    NamedTensors parameters() const;
    std::size_t count_params() const;
    /// Per-token multiplies excluding attention score/value products.
    std::size_t count_flops() const;

    NamedTensors to_tensors() const;
    static TargetModel from_tensors(const NamedTensors& t);

    struct Layer {
        Tensor attn_norm, ffn_norm;
        AttentionWeights attn;
        FeedForward ffn;
    };

    Tensor tok_emb, pos_emb, final_norm, head;
    std::vector<Layer> layers;

private:
    TargetConfig cfg_;
};

// ----- draft -----

struct DraftConfig {
    std::size_t vocab = 128;         ///< draft output vocabulary
    std::size_t target_vocab = 256;  ///< token-input vocabulary
    std::size_t d = 64;
    std::size_t heads = 2;
    std::size_t max_pos = 128;
    FfnConfig ffn{};
    void validate() const;
};

struct DraftStep {
    Tensor logits;    ///< [n, vocab]
    Tensor features;  ///< [n, d]; fed back as the next step's hidden input
};

class DraftModel {
public:
    DraftModel() = default;
    /// `draft_to_target` maps each draft output id to a target token id.
    DraftModel(const DraftConfig& cfg, std::vector<std::uint32_t> draft_to_target, Rng& rng);

    const DraftConfig& config() const { return cfg_; }
    const std::vector<std::uint32_t>& vocab_map() const { return d2t_; }

    /// Projects target features [n, 3d] to the draft width.
    Tensor fuse(const Tensor& fused) const;

    /// One decoder pass. `hidden` is [n, d] (fuse() output on the first
    /// step, the previous step's features afterwards).
    DraftStep step(const Tensor& hidden, std::span<const std::uint32_t> tokens,
                   std::span<const std::uint32_t> positions, const AttnFn& attn) const;

    /// Training-time form: attention goes through ttt_attention_step with
    /// `state` and `mask`. `input` is [n, 3d] when mask.step == 0 and the
    /// previous features [n, d] otherwise.
    DraftStep ttt_forward(const Tensor& input, std::span<const std::uint32_t> tokens,
                          std::span<const std::uint32_t> positions, TTTState& state,
                          const BlockMask& mask) const;

    NamedTensors parameters() const;
    std::size_t count_params() const;
    std::size_t count_flops() const;
    BlockCost block_cost() const;

    NamedTensors to_tensors() const;
    static DraftModel from_tensors(const NamedTensors& t);

    Tensor tok_emb, pos_emb, fc, w_in, emb_norm, hidden_norm, attn_norm, ffn_norm, final_norm, head;
    AttentionWeights attn;
    FeedForward ffn;

private:
    DraftConfig cfg_;
    std::vector<std::uint32_t> d2t_;
};

// ----- checkpoint container -----

/// Writes "SPFG", u32 version, then per tensor: u16 name length, name,
/// u8 rank, u32 extents, little-endian f32 payload.
void save_tensors(const std::string& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::string& path);
std::vector<std::uint8_t> encode_tensors(const NamedTensors& tensors);
NamedTensors decode_tensors(std::span<const std::uint8_t> bytes);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace speclab
