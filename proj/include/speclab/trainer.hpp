// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Target pretraining, corpus regeneration through the engine, and the
// unrolled (test-time-training style) draft training loop.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include "speclab/corpus.hpp"
#include "speclab/engine.hpp"
#include "speclab/model.hpp"

namespace speclab {

// ----- optimisation -----

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled weight decay on rank >= 2 tensors; vectors (norm gains) are
/// not decayed.
class AdamW {
public:
    AdamW(NamedTensors params, const AdamWConfig& cfg);
    /// Applies one update from the accumulated grads, then zeroes them.
    void step(double lr);
    std::size_t steps() const { return t_; }

private:
    NamedTensors params_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    std::size_t t_ = 0;
};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero
/// at `total`.
double lr_at(std::size_t step, std::size_t total, std::size_t warmup, double peak);

/// Sequence-order shuffles of [0, n) for each epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// ----- vocabulary -----

/// The `draft_vocab` most frequent target ids in the corpus, ties to the
/// lower id, returned in ascending id order. Throws when draft_vocab
/// exceeds target_vocab.
std::vector<std::uint32_t> build_vocab_map(const Corpus& corpus, std::size_t target_vocab, std::size_t draft_vocab);

// ----- target -----

struct PretrainConfig {
    std::size_t epochs = 3;
    std::size_t batch_size = 8;
    double lr = 3e-3;
    double warmup_frac = 0.05;
    std::size_t q_len = 64;
    std::size_t block = 16;
    std::uint64_t seed = 0;
    AdamWConfig adamw{};
    void validate() const;
};

/// Next-token training of the target on every position of each sample.
/// Throws DivergenceError on a non-finite loss.
void pretrain_target(TargetModel& model, const Corpus& corpus, const PretrainConfig& cfg,
                     const std::function<void(std::size_t step, double loss)>& on_step = {});

/// exp(mean next-token NLL) over all positions.
double perplexity(const TargetModel& model, const Corpus& corpus);

/// Keeps each prompt and re-samples the response from the target at
/// `temperature` (argmax when temperature is 0), preserving the length.
Corpus regenerate_corpus(EngineBackend& engine, const Corpus& corpus, double temperature, std::uint64_t seed);

// ----- draft -----

struct TrainConfig {
    std::size_t ttt_len = 7;
    std::size_t epochs = 2;
    std::size_t batch_size = 8;
    double lr = 2e-3;
    double warmup_frac = 0.05;
    std::vector<double> step_weights;  ///< empty = all ones
    bool sampled_tokens = false;       ///< feed the draft's own argmax on steps > 0
    bool regenerate_data = false;      ///< resample responses from the target first
    double regen_temperature = 0.8;
    std::size_t q_len = 64;
    std::size_t block = 16;
    std::uint64_t seed = 0;
    AdamWConfig adamw{};
    void validate() const;
    double weight(std::size_t j) const { return step_weights.empty() ? 1.0 : step_weights[j]; }
};

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0.0;
    std::vector<double> loss_per_ttt_step;
    std::vector<double> top1_agreement;
};

/// Prepared per-sample inputs for one unrolled pass.
struct DraftExample {
    std::vector<std::uint32_t> tokens;  ///< length T
    std::vector<std::uint8_t> loss_mask;
    Tensor fused;   ///< [T, 3d] target features
    Tensor target;  ///< [T, draft_vocab] distilled target distribution
};

DraftExample prepare_example(EngineBackend& engine, const Sample& sample, std::span<const std::uint32_t> d2t,
                             std::uint64_t request_id);

struct UnrollResult {
    Tensor loss;                       ///< weighted sum over steps, scalar
    std::vector<double> step_loss;     ///< NaN where a step has no valid row
    std::vector<double> step_top1;
    std::vector<std::size_t> step_rows;
};

/// Builds the graph of ttt_len unrolled steps for one example. Row t of
/// step j reads token x[t+j+1] at position t and is scored against the
/// target distribution at t+j+1 when t+j+1 < T and that position is a
/// loss position.
UnrollResult unroll(const DraftModel& draft, const DraftExample& ex, const TrainConfig& cfg);

/// Trains `draft` in place, first regenerating the corpus through the
/// engine when cfg.regenerate_data is set. Metrics are written as JSON lines when `metrics`
/// is non-null. Throws DivergenceError on a non-finite loss.
std::vector<StepMetrics> train_draft(DraftModel& draft, EngineBackend& engine, const Corpus& corpus,
                                     const TrainConfig& cfg, std::ostream* metrics = nullptr);

}  // namespace speclab
