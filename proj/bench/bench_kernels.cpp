// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Serial reference against OpenMP kernels, plus end-to-end decoding on the
// shipped tiny checkpoints.

#include <benchmark/benchmark.h>

#include <vector>

#include "speclab/attention.hpp"
#include "speclab/blockmask.hpp"
#include "speclab/config.hpp"
#include "speclab/corpus.hpp"
#include "speclab/kernels.hpp"
#include "speclab/loss.hpp"
#include "speclab/model.hpp"
#include "speclab/rng.hpp"
#include "speclab/specdec.hpp"

namespace {

using namespace speclab;

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

enum class Impl { Serial, Parallel };

template <Impl I>
void BM_Matmul(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        if constexpr (I == Impl::Serial)
            kernels::serial::matmul(a, b, c, {n, n, n});
        else
            kernels::parallel::matmul(a, b, c, {n, n, n});
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
    state.counters["threads"] = kernels::num_threads();
}
BENCHMARK(BM_Matmul<Impl::Serial>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Matmul<Impl::Parallel>)->Arg(64)->Arg(128)->Arg(256);

template <Impl I>
void BM_MatmulNT(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    const auto a = random_values(n * n, 3), b = random_values(n * n, 4);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        if constexpr (I == Impl::Serial)
            kernels::serial::matmul_nt(a, b, c, {n, n, n});
        else
            kernels::parallel::matmul_nt(a, b, c, {n, n, n});
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_MatmulNT<Impl::Serial>)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulNT<Impl::Parallel>)->Arg(128)->Arg(256);

struct AttentionCase {
    MaskParams params;
    BlockMask mask;
    std::vector<float> q, k, v, out, dout, dq, dk, dv;
    std::vector<double> lse;
    std::size_t dk_dim = 32;

    explicit AttentionCase(std::size_t lq)
        : params{lq, lq, 1, 16}, mask(build_blockmask(params)) {
        const std::size_t lkv = params.kv_len();
        q = random_values(lq * dk_dim, 5);
        k = random_values(lkv * dk_dim, 6);
        v = random_values(lkv * dk_dim, 7);
        dout = random_values(lq * dk_dim, 8);
        out.resize(lq * dk_dim);
        lse.resize(lq);
        dq.resize(q.size());
        dk.resize(k.size());
        dv.resize(v.size());
    }
    kernels::StreamingProblem problem() const {
        return {q, k, v, params.q_len, params.kv_len(), 1, dk_dim, dk_dim};
    }
};

template <Impl I>
void BM_StreamingForward(benchmark::State& state) {
    AttentionCase c(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        if constexpr (I == Impl::Serial)
            kernels::serial::streaming_attention_forward(c.problem(), c.mask, c.out, c.lse);
        else
            kernels::parallel::streaming_attention_forward(c.problem(), c.mask, c.out, c.lse);
        benchmark::DoNotOptimize(c.out.data());
    }
}
BENCHMARK(BM_StreamingForward<Impl::Serial>)->Arg(256)->Arg(1024);
BENCHMARK(BM_StreamingForward<Impl::Parallel>)->Arg(256)->Arg(1024);

template <Impl I>
void BM_StreamingBackward(benchmark::State& state) {
    AttentionCase c(static_cast<std::size_t>(state.range(0)));
    kernels::serial::streaming_attention_forward(c.problem(), c.mask, c.out, c.lse);
    for (auto _ : state) {
        if constexpr (I == Impl::Serial)
            kernels::serial::streaming_attention_backward(c.problem(), c.mask, c.out, c.lse, c.dout, c.dq, c.dk, c.dv);
        else
            kernels::parallel::streaming_attention_backward(c.problem(), c.mask, c.out, c.lse, c.dout, c.dq, c.dk,
                                                            c.dv);
        benchmark::DoNotOptimize(c.dq.data());
    }
}
BENCHMARK(BM_StreamingBackward<Impl::Serial>)->Arg(256)->Arg(1024);
BENCHMARK(BM_StreamingBackward<Impl::Parallel>)->Arg(256)->Arg(1024);

void BM_DenseMaskedAttention(benchmark::State& state) {
    const std::size_t lq = static_cast<std::size_t>(state.range(0));
    AttentionCase c(lq);
    const Tensor dense_mask = expand_dense(c.mask);
    const Tensor q({lq, c.dk_dim}, c.q), k({c.params.kv_len(), c.dk_dim}, c.k), v({c.params.kv_len(), c.dk_dim}, c.v);
    for (auto _ : state) benchmark::DoNotOptimize(dense_masked_attention(q, k, v, dense_mask));
}
BENCHMARK(BM_DenseMaskedAttention)->Arg(256)->Arg(1024);

/// In-place (OpenMP over rows) against the out-of-place serial reference.
template <bool InPlace>
void BM_LossBackward(benchmark::State& state) {
    const std::size_t rows = static_cast<std::size_t>(state.range(0)), vocab = 256;
    const auto z = random_values(rows * vocab, 9);
    std::vector<float> p(rows * vocab, 1.0f / vocab);
    std::vector<std::uint8_t> mask(rows, 1);
    const LossView view{rows, vocab, mask, {}};
    std::vector<float> buf(z.size());
    for (auto _ : state) {
        if constexpr (InPlace) {
            state.PauseTiming();
            buf = z;
            state.ResumeTiming();
            loss_backward_inplace(buf, p, view);
            benchmark::DoNotOptimize(buf.data());
        } else {
            benchmark::DoNotOptimize(loss_backward_reference(z, p, view));
        }
    }
}
BENCHMARK(BM_LossBackward<false>)->Arg(512)->Arg(4096);
BENCHMARK(BM_LossBackward<true>)->Arg(512)->Arg(4096);

struct TinyPair {
    RunConfig cfg;
    TargetModel target;
    DraftModel draft;
    std::vector<std::vector<std::uint32_t>> prompts;

    static const TinyPair& get() {
        static const TinyPair pair = [] {
            const std::string dir = std::string(SPECLAB_SOURCE_DIR) + "/checkpoints/tiny";
            TinyPair p;
            p.cfg = load_run_config(dir + "/config.json");
            p.target = TargetModel::from_tensors(load_tensors(dir + "/target.ckpt"));
            p.draft = DraftModel::from_tensors(load_tensors(dir + "/draft.ckpt"));
            p.prompts = make_prompts(p.cfg.prompt_seed(), 4, p.cfg.corpus.grammar);
            return p;
        }();
        return pair;
    }
};

void BM_VanillaDecode(benchmark::State& state) {
    const auto& t = TinyPair::get();
    for (auto _ : state)
        for (const auto& p : t.prompts) benchmark::DoNotOptimize(vanilla_decode(t.target, p, 64));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(64 * t.prompts.size()));
}
BENCHMARK(BM_VanillaDecode)->Unit(benchmark::kMillisecond);

void BM_SpecDecode(benchmark::State& state) {
    const auto& t = TinyPair::get();
    const SpecConfig sc{static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                        static_cast<std::size_t>(state.range(2))};
    AcceptanceStats stats;
    for (auto _ : state)
        for (const auto& p : t.prompts) stats.merge(spec_decode(t.target, t.draft, p, 64, sc).stats);
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(64 * t.prompts.size()));
    state.counters["tau"] = stats.tau();
}
BENCHMARK(BM_SpecDecode)
    ->Args({3, 1, 4})
    ->Args({5, 1, 6})
    ->Args({5, 3, 6})
    ->Args({7, 1, 8})
    ->Args({7, 4, 8})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
