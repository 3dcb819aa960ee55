// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/blockmask.hpp"

#include <bit>

#include "speclab/error.hpp"

namespace speclab {

void MaskParams::validate() const {
    if (q_len == 0) throw InvalidArgument("mask: q_len must be positive");
    if (seq_len == 0 || seq_len > q_len)
        throw InvalidArgument("mask: seq_len must satisfy 0 < T <= q_len (T=" +
                              std::to_string(seq_len) + ", q_len=" + std::to_string(q_len) + ")");
    if (block == 0 || !std::has_single_bit(block))
        throw InvalidArgument("mask: block must be a power of two");
    if (q_len % block != 0)
        throw InvalidArgument("mask: block " + std::to_string(block) + " does not divide q_len " +
                              std::to_string(q_len));
}

bool ttt_mask_predicate(const MaskParams& p, std::size_t q, std::size_t kv) {
    if (q >= p.q_len || kv >= p.kv_len())
        throw IndexError("mask predicate: (" + std::to_string(q) + "," + std::to_string(kv) +
                         ") outside [" + std::to_string(p.q_len) + "," +
                         std::to_string(p.kv_len()) + ")");
    return ttt_allowed(p, q, kv);
}

BlockMask::BlockMask(const MaskParams& p) : params_(p) {
    p.validate();
    const std::size_t b = p.block;
    q_blocks_ = p.q_len / b;
    kv_blocks_ = p.kv_len() / b;
    kinds_.assign(q_blocks_ * kv_blocks_, BlockKind::Skipped);

    for (std::size_t qb = 0; qb < q_blocks_; ++qb) {
        for (std::size_t kb = 0; kb < kv_blocks_; ++kb) {
            bool any = false, all = true;
            for (std::size_t q = qb * b; q < (qb + 1) * b && (all || !any); ++q)
                for (std::size_t kv = kb * b; kv < (kb + 1) * b; ++kv) {
                    if (ttt_allowed(p, q, kv)) any = true;
                    else all = false;
                    if (any && !all) break;
                }
            kinds_[qb * kv_blocks_ + kb] =
                !any ? BlockKind::Skipped : (all ? BlockKind::Full : BlockKind::Partial);
        }
    }

    row_offsets_.push_back(0);
    for (std::size_t qb = 0; qb < q_blocks_; ++qb) {
        for (std::size_t kb = 0; kb < kv_blocks_; ++kb)
            if (auto k = kind(qb, kb); k != BlockKind::Skipped)
                row_refs_.push_back({static_cast<std::uint32_t>(kb), k == BlockKind::Full});
        row_offsets_.push_back(row_refs_.size());
    }
    col_offsets_.push_back(0);
    for (std::size_t kb = 0; kb < kv_blocks_; ++kb) {
        for (std::size_t qb = 0; qb < q_blocks_; ++qb)
            if (auto k = kind(qb, kb); k != BlockKind::Skipped)
                col_refs_.push_back({static_cast<std::uint32_t>(qb), k == BlockKind::Full});
        col_offsets_.push_back(col_refs_.size());
    }
}

std::vector<std::uint32_t> BlockMask::full_blocks(std::size_t q_block) const {
    std::vector<std::uint32_t> out;
    for (auto r : row_blocks(q_block))
        if (r.full) out.push_back(r.index);
    return out;
}

std::vector<std::uint32_t> BlockMask::partial_blocks(std::size_t q_block) const {
    std::vector<std::uint32_t> out;
    for (auto r : row_blocks(q_block))
        if (!r.full) out.push_back(r.index);
    return out;
}

std::span<const BlockRef> BlockMask::row_blocks(std::size_t q_block) const {
    if (q_block >= q_blocks_) throw IndexError("row_blocks: query block out of range");
    return {row_refs_.data() + row_offsets_[q_block], row_offsets_[q_block + 1] - row_offsets_[q_block]};
}

std::span<const BlockRef> BlockMask::col_blocks(std::size_t kv_block) const {
    if (kv_block >= kv_blocks_) throw IndexError("col_blocks: key block out of range");
    return {col_refs_.data() + col_offsets_[kv_block],
            col_offsets_[kv_block + 1] - col_offsets_[kv_block]};
}

std::size_t BlockMask::count(BlockKind k) const {
    std::size_t n = 0;
    for (auto x : kinds_) n += (x == k);
    return n;
}

BlockMask build_blockmask(const MaskParams& p) { return BlockMask(p); }

Tensor expand_dense(const BlockMask& mask) {
    const auto& p = mask.params();
    const std::size_t kv = p.kv_len();
    Tensor out({p.q_len, kv});
    auto d = out.data();
    for (std::size_t q = 0; q < p.q_len; ++q)
        for (std::size_t k = 0; k < kv; ++k) d[q * kv + k] = ttt_allowed(p, q, k) ? 1.0f : 0.0f;
    return out;
}

std::string render_mask(const BlockMask& mask) {
    const auto& p = mask.params();
    std::string out;
    for (std::size_t q = 0; q < p.q_len; ++q) {
        if (q) out += '\n';
        for (std::size_t k = 0; k < p.kv_len(); ++k) {
            if (k && k % p.q_len == 0) out += "│";
            out += ttt_allowed(p, q, k) ? "█" : "·";
        }
    }
    return out;
}

}  // namespace speclab
