// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Speculative decoding with the draft head: tree drafting, greedy tree
// verification, lossless stochastic chain verification and acceptance
// statistics.
//
// Decode state: `seq` holds every emitted token and the target features of
// seq[0..n-2] are known. The last token is the tree root. The draft reads
// row t = (features t, token t+1) at position t, so the root sits on row
// n-2 and every deeper tree node reuses that position.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speclab/model.hpp"
#include "speclab/rng.hpp"

namespace speclab {

enum class DecodeMode : std::uint8_t { Greedy = 0, Stochastic = 1 };

const char* to_string(DecodeMode m);
DecodeMode parse_decode_mode(const std::string& s);

struct SpecConfig {
    std::size_t steps = 3;         ///< speculative depth
    std::size_t topk = 1;          ///< branching per expanded node
    std::size_t draft_tokens = 4;  ///< tree size including the root
    DecodeMode mode = DecodeMode::Greedy;
    double temperature = 1.0;      ///< stochastic mode only

    /// Throws InvalidArgument. Stochastic mode requires topk == 1.
    void validate() const;
    /// "(steps,topk,draft_tokens)".
    std::string label() const;
};

struct TreeNode {
    std::uint32_t token = 0;  ///< target id
    std::int32_t parent = -1;
    std::uint32_t depth = 0;
    double logp = 0.0;        ///< cumulative draft log-probability
};

/// Node 0 is the root. Parents precede children.
struct DraftTree {
    std::vector<TreeNode> nodes;

    std::size_t proposals() const { return nodes.empty() ? 0 : nodes.size() - 1; }
    /// Throws InternalError when an invariant fails.
    void validate(std::size_t max_nodes) const;
    /// Row-major [n, n] ancestor-or-self matrix.
    std::vector<std::uint8_t> ancestor_mask() const;
};

/// `pool` parents index into `pool`, with -1 for the root. Keeps the
/// `keep` best candidates by (logp desc, depth asc, token asc,
/// parent asc). Because a child never outscores its parent the result is
/// closed under ancestors. Returns them re-indexed in topological order
/// after the root.
DraftTree select_tree(const TreeNode& root, const std::vector<TreeNode>& pool, std::size_t keep);

/// Expands `steps` levels from the root, branching topk per expanded node
/// and carrying the topk best nodes of each level forward, then keeps the
/// draft_tokens - 1 best candidates.
/// `features` is [n-1, 3d] for the context tokens seq[0..n-2].
DraftTree draft_propose(const DraftModel& draft, const Tensor& features, std::span<const std::uint32_t> seq,
                        const SpecConfig& cfg, std::size_t max_steps);

/// Samples a chain of up to `max_steps` tokens from the tempered draft.
/// `q` receives, per proposal, the draft law over target ids it was drawn
/// from.
std::vector<std::uint32_t> draft_sample_chain(const DraftModel& draft, const Tensor& features,
                                              std::span<const std::uint32_t> seq, std::size_t max_steps,
                                              double temperature, Rng& rng, std::vector<std::vector<double>>& q);

struct VerifyOutput {
    std::vector<std::size_t> accepted;  ///< node indices along the accepted path, root excluded
    std::uint32_t bonus = 0;
    Tensor fused;                       ///< [n + nodes - 1, 3d] target features of seq plus tree
};

/// Target forward over seq followed by the non-root tree nodes; node i
/// sits on row n-1+i at position n-1+depth and sees seq plus its
/// ancestors. Root is row n-1.
TargetOutput target_tree_forward(const TargetModel& target, const DraftTree& tree, std::span<const std::uint32_t> seq);

/// One target forward over seq plus the non-root tree nodes under an
/// ancestor mask. Accepts the longest root path whose every node equals the
/// target argmax at its parent, then emits the argmax after that path.
VerifyOutput verify_greedy(const TargetModel& target, const DraftTree& tree, std::span<const std::uint32_t> seq);

/// Speculative sampling on one chain. `p` has proposals+1 rows and `q` has
/// proposals rows, each a distribution over the same vocabulary. Throws
/// InternalError when q(x) == 0 for a proposed x.
struct ChainOutcome {
    std::size_t accepted = 0;
    std::uint32_t token = 0;  ///< correction on rejection, bonus otherwise
};
ChainOutcome verify_stochastic(std::span<const std::vector<double>> p, std::span<const std::vector<double>> q,
                               std::span<const std::uint32_t> proposals, Rng& rng);

/// Exact output law of one proposal step, by enumerating proposal and
/// accept/reject outcomes.
std::vector<double> stochastic_step_law(std::span<const double> p, std::span<const double> q);

/// softmax(logits / temperature) in double.
std::vector<double> tempered_softmax(std::span<const float> logits, double temperature);

struct AcceptanceStats {
    std::size_t cycles = 0;
    std::size_t proposed = 0;
    std::size_t accepted = 0;
    std::size_t emitted = 0;                 ///< tokens produced by cycles
    std::vector<std::size_t> accept_hist;    ///< cycles by accepted count

    double tau() const;
    void merge(const AcceptanceStats& o);
    /// Throws InternalError unless accepted <= proposed and
    /// accepted + cycles == emitted.
    void check() const;
};

struct DecodeResult {
    std::vector<std::uint32_t> tokens;  ///< generated tokens only
    AcceptanceStats stats;
};

/// Plain autoregressive decoding of `max_new` tokens.
std::vector<std::uint32_t> vanilla_decode(const TargetModel& target, std::span<const std::uint32_t> prompt,
                                          std::size_t max_new, DecodeMode mode = DecodeMode::Greedy,
                                          double temperature = 1.0, Rng* rng = nullptr);

/// Speculative decoding of `max_new` tokens. The prefill produces the
/// first token; every later token comes from a draft/verify cycle. Trees
/// are cut to the remaining budget so no cycle overshoots.
DecodeResult spec_decode(const TargetModel& target, const DraftModel& draft, std::span<const std::uint32_t> prompt,
                         std::size_t max_new, const SpecConfig& cfg, Rng* rng = nullptr);

struct BenchmarkResult {
    std::string config;
    std::size_t prompts = 0;
    AcceptanceStats stats;
    double alpha_hat = 0.0;
    double modeled_speedup = 0.0;
    std::vector<std::vector<std::uint32_t>> outputs;
};

/// Decodes each prompt to `max_new` tokens. alpha_hat inverts the
/// truncated-geometric model at gamma = steps; modeled_speedup applies it
/// with `cost_ratio`. Throws InvalidArgument when max_new == 0.
BenchmarkResult run_benchmark(const TargetModel& target, const DraftModel& draft,
                              const std::vector<std::vector<std::uint32_t>>& prompts, const SpecConfig& cfg,
                              std::size_t max_new, std::uint64_t seed = 0, double cost_ratio = 0.05);

std::string benchmark_csv_header();
std::string benchmark_csv_row(const BenchmarkResult& r);

}  // namespace speclab
