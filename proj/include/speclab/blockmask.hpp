// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Block-compressed attention mask for training-time-test unrolling.
//
// Query rows are the Q_LEN positions of one padded sequence. The key axis
// holds (step + 1) segments of Q_LEN keys: segment 0 is the prefix (causal
// over the first T real tokens), and each later segment contributes only its
// diagonal, i.e. the key produced for the same row at an earlier unroll step.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speclab/tensor.hpp"

namespace speclab {

struct MaskParams {
    std::size_t q_len = 0;    ///< padded per-step length Q_LEN
    std::size_t seq_len = 0;  ///< real tokens T, 0 < T <= Q_LEN
    std::size_t step = 0;     ///< unroll step j; keys span (j+1)*Q_LEN
    std::size_t block = 16;   ///< block side B, a power of two dividing Q_LEN

    std::size_t kv_len() const { return (step + 1) * q_len; }
    /// Throws InvalidArgument when an invariant fails.
    void validate() const;
};

/// Element predicate: causal-with-padding over the prefix segment, padded
/// diagonal over every later segment. Throws IndexError out of range.
bool ttt_mask_predicate(const MaskParams& p, std::size_t q, std::size_t kv);

/// Unchecked form for inner loops.
inline bool ttt_allowed(const MaskParams& p, std::size_t q, std::size_t kv) noexcept {
    const bool causal = q >= kv && kv < p.seq_len;
    const bool suffix = kv >= p.q_len && kv % p.q_len < p.seq_len && (kv - q) % p.q_len == 0;
    return causal || suffix;
}

enum class BlockKind : std::uint8_t { Skipped = 0, Partial = 1, Full = 2 };

/// One non-skipped block in a row (or column) listing.
struct BlockRef {
    std::uint32_t index;
    bool full;
};

class BlockMask {
public:
    explicit BlockMask(const MaskParams& p);

    const MaskParams& params() const { return params_; }
    std::size_t query_blocks() const { return q_blocks_; }
    std::size_t key_blocks() const { return kv_blocks_; }

    BlockKind kind(std::size_t q_block, std::size_t kv_block) const {
        return kinds_[q_block * kv_blocks_ + kv_block];
    }
    std::vector<std::uint32_t> full_blocks(std::size_t q_block) const;
    std::vector<std::uint32_t> partial_blocks(std::size_t q_block) const;

    /// Non-skipped key blocks of a query block, ascending.
    std::span<const BlockRef> row_blocks(std::size_t q_block) const;
    /// Non-skipped query blocks of a key block, ascending.
    std::span<const BlockRef> col_blocks(std::size_t kv_block) const;

    /// Element-level re-evaluation used inside partial blocks.
    bool allowed(std::size_t q, std::size_t kv) const { return ttt_allowed(params_, q, kv); }

    std::size_t count(BlockKind k) const;

private:
    MaskParams params_;
    std::size_t q_blocks_ = 0;
    std::size_t kv_blocks_ = 0;
    std::vector<BlockKind> kinds_;
    std::vector<BlockRef> row_refs_;
    std::vector<std::size_t> row_offsets_;
    std::vector<BlockRef> col_refs_;
    std::vector<std::size_t> col_offsets_;
};

BlockMask build_blockmask(const MaskParams& p);

/// Dense {0,1} matrix [Q_LEN, (step+1)*Q_LEN] of the predicate.
Tensor expand_dense(const BlockMask& mask);

/// Character grid: '█' allowed, '·' masked, '│' between key segments.
/// Rows are joined by '\n' with no trailing newline.
std::string render_mask(const BlockMask& mask);

}  // namespace speclab
