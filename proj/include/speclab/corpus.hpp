// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic prompt/response corpus.
//
// Each sample is a prompt, a marker token, then a response. Token transitions
// follow a successor table indexed by (parity of the previous token, current
// token): a primary successor, a secondary one, else uniform over all
// content tokens. After the COPY marker the response first repeats the
// prompt and then continues the chain; after the GEN marker it continues the
// chain directly. Loss positions are the response tokens.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "speclab/rng.hpp"

namespace speclab {

inline constexpr std::uint32_t kPadToken = 0;
inline constexpr std::uint32_t kCopyMarker = 2;
inline constexpr std::uint32_t kGenMarker = 3;
inline constexpr std::uint32_t kFirstContentToken = 4;

struct GrammarParams {
    std::size_t vocab = 256;
    std::size_t hot_tokens = 112;  ///< successor-table entries are drawn from these
    double primary_prob = 0.85;
    double secondary_prob = 0.10;
    double copy_prob = 0.3;
    std::size_t prompt_min = 8;
    std::size_t prompt_max = 16;
    std::size_t response_min = 16;
    std::size_t max_len = 57;
    std::uint64_t table_seed = 1234;  ///< fixes the grammar independently of sampling
    void validate() const;
};

struct Sample {
    std::vector<std::uint32_t> tokens;
    std::vector<std::uint8_t> loss_mask;  ///< true on response tokens

    /// Number of leading non-loss tokens (prompt plus marker).
    std::size_t prompt_len() const;
    bool operator==(const Sample&) const = default;
};

struct Corpus {
    GrammarParams grammar;
    std::vector<Sample> samples;
};

/// The successor table: [2][vocab] primary and secondary successors.
struct Grammar {
    explicit Grammar(const GrammarParams& p);
    std::uint32_t next(std::uint32_t prev, std::uint32_t cur, Rng& rng) const;
    /// Exact next-token law for a (prev, cur) context.
    std::vector<double> law(std::uint32_t prev, std::uint32_t cur) const;

    GrammarParams params;
    std::vector<std::uint32_t> primary, secondary;  ///< index: (prev & 1) * vocab + cur
};

/// Deterministic in (seed, params). Throws InvalidArgument for n == 0.
Corpus make_synthetic_corpus(std::uint64_t seed, std::size_t n_samples, const GrammarParams& params = {});

/// Prompts (prompt plus marker) of fresh samples, for held-out decoding.
std::vector<std::vector<std::uint32_t>> make_prompts(std::uint64_t seed, std::size_t n, const GrammarParams& params = {});

/// JSON-lines: one {"tokens": [...], "mask": [...]} object per line, after
/// a first line holding the grammar parameters.
void save_corpus(const std::string& path, const Corpus& c);
Corpus load_corpus(const std::string& path);

}  // namespace speclab
