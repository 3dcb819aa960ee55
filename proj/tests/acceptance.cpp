// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate. Runs the twelve acceptance checks at their stated
// tolerances and prints one PASS/FAIL line each. Exit status is non-zero
// when any check fails. Optional arguments select a subset by number.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "speclab/analytics.hpp"
#include "speclab/attention.hpp"
#include "speclab/blockmask.hpp"
#include "speclab/cli.hpp"
#include "speclab/config.hpp"
#include "speclab/corpus.hpp"
#include "speclab/engine.hpp"
#include "speclab/loss.hpp"
#include "speclab/model.hpp"
#include "speclab/specdec.hpp"
#include "speclab/trainer.hpp"
#include "test_support.hpp"

namespace speclab {
namespace {

namespace fs = std::filesystem;
using testing::check_gradients;
using testing::max_abs_diff;
using testing::random_tensor;
using testing::weighted_sum;

const std::string kSource = SPECLAB_SOURCE_DIR;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void progress(const std::string& msg) {
    std::fprintf(stderr, "    %s\n", msg.c_str());
    std::fflush(stderr);
}

std::vector<std::uint8_t> mask_bits(const Tensor& dense) {
    std::vector<std::uint8_t> out(dense.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = dense.data()[i] != 0.0f;
    return out;
}

// ---------------------------------------------------------------- 1

/// Mask predicate written from its definition: the first key segment is
/// causal over real tokens, each later segment holds only the diagonal.
bool oracle_allowed(std::size_t q_len, std::size_t seq_len, std::size_t q, std::size_t kv) {
    const std::size_t segment = kv / q_len, r = kv % q_len;
    if (r >= seq_len) return false;
    return segment == 0 ? r <= q : r == q;
}

Outcome mask_oracle() {
    Rng rng(1001);
    const std::size_t blocks[] = {4, 8, 16};
    std::size_t cells = 0;
    for (int c = 0; c < 200; ++c) {
        const std::size_t b = blocks[rng.below(3)];
        const std::size_t q_len = b * (1 + rng.below(64 / b));
        const std::size_t seq_len = 1 + rng.below(q_len);
        const std::size_t step = rng.below(9);
        const MaskParams p{q_len, seq_len, step, b};
        const Tensor dense = expand_dense(build_blockmask(p));
        if (dense.rows() != q_len || dense.cols() != p.kv_len())
            return {false, fmt::format("case {}: dense shape mismatch", c)};
        for (std::size_t q = 0; q < q_len; ++q)
            for (std::size_t kv = 0; kv < p.kv_len(); ++kv) {
                const bool want = oracle_allowed(q_len, seq_len, q, kv);
                if ((dense.at(q, kv) != 0.0f) != want || ttt_mask_predicate(p, q, kv) != want)
                    return {false, fmt::format("case {} (Q={},T={},step={},B={}) differs at ({},{})", c, q_len,
                                               seq_len, step, b, q, kv)};
                ++cells;
            }
    }
    return {true, fmt::format("200 cases, {} cells bit-exact", cells)};
}

// ---------------------------------------------------------------- 2

Outcome attention_equivalence() {
    Rng rng(2002);
    double worst = 0.0;
    const std::size_t blocks[] = {4, 8, 16};
    for (int c = 0; c < 50; ++c) {
        const std::size_t b = blocks[rng.below(3)];
        const std::size_t q_len = b * (1 + rng.below(64 / b));
        const std::size_t seq_len = 1 + rng.below(q_len), steps = rng.below(5);
        const std::size_t dk = 1 + rng.below(32), dv = 1 + rng.below(32);
        std::vector<Tensor> ks, vs;
        TTTState state;
        for (std::size_t j = 0; j <= steps; ++j) {
            Tensor q = random_tensor({q_len, dk}, rng), k = random_tensor({q_len, dk}, rng),
                   v = random_tensor({q_len, dv}, rng);
            ks.push_back(k);
            vs.push_back(v);
            const BlockMask m = build_blockmask({q_len, seq_len, j, b});
            const Tensor kk = concat_rows(ks), vv = concat_rows(vs);
            const Tensor streaming = streaming_attention(q, kk, vv, m);
            const Tensor dense = dense_masked_attention(q, kk, vv, mask_bits(expand_dense(m)));
            std::span<const Tensor> sk(ks.begin() + 1, ks.end()), sv(vs.begin() + 1, vs.end());
            const Tensor loop = ttt_attention_reference(q, ks[0], vs[0], sk, sv, seq_len);
            const Tensor incremental = ttt_attention_step(state, q, k, v, m);
            worst = std::max({worst, max_abs_diff(streaming.data(), dense.data()),
                              max_abs_diff(streaming.data(), loop.data()),
                              max_abs_diff(incremental.data(), dense.data())});
        }
    }
    if (worst > 1e-5) return {false, fmt::format("max |diff| {:.3g} > 1e-5", worst)};

    double worst_grad = 0.0;
    for (int c = 0; c < 20; ++c) {
        const std::size_t b = 4, q_len = 4 * (1 + rng.below(3)), seq_len = 1 + rng.below(q_len);
        const std::size_t step = rng.below(4), dk = 1 + rng.below(6), dv = 1 + rng.below(6);
        testing::GradCheck g;
        if (c % 2 == 0) {
            const BlockMask m = build_blockmask({q_len, seq_len, step, b});
            const std::size_t lkv = m.params().kv_len();
            Tensor probe = random_tensor({q_len, dv}, rng);
            auto f = [&](std::vector<Tensor>& in) {
                return weighted_sum(streaming_attention(in[0], in[1], in[2], m), probe);
            };
            g = check_gradients(f, {random_tensor({q_len, dk}, rng), random_tensor({lkv, dk}, rng),
                                    random_tensor({lkv, dv}, rng)});
        } else {
            const std::size_t d = dk;
            Tensor probe = random_tensor({q_len, d}, rng);
            auto f = [&](std::vector<Tensor>& in) {
                TTTState st;
                Tensor h = in[0];
                for (std::size_t j = 0; j <= step; ++j)
                    h = ttt_attention_step(st, matmul(h, in[1]), matmul(h, in[2]), matmul(h, in[3]),
                                           build_blockmask({q_len, seq_len, j, b}));
                return weighted_sum(h, probe);
            };
            g = check_gradients(f, {random_tensor({q_len, d}, rng), random_tensor({d, d}, rng, 0.7f),
                                    random_tensor({d, d}, rng, 0.7f), random_tensor({d, d}, rng, 0.7f)});
        }
        worst_grad = std::max(worst_grad, g.rel_error);
    }
    const bool ok = worst_grad < 1e-2;
    return {ok, fmt::format("50 configs max |diff| {:.2e}; 20 gradient cases max rel err {:.2e}", worst,
                            worst_grad)};
}

// ---------------------------------------------------------------- 3

Outcome memory_property() {
    Rng rng(3003);
    const std::size_t lq = 2048, dk = 16;
    std::string detail;
    bool ok = true;
    for (std::size_t step : {0u, 1u}) {
        const MaskParams p{lq, lq, step, 16};
        const BlockMask m = build_blockmask(p);
        const std::size_t lkv = p.kv_len();
        Tensor q = random_tensor({lq, dk}, rng), k = random_tensor({lkv, dk}, rng), v = random_tensor({lkv, dk}, rng);
        const std::size_t peak = meter_scope(AllocCategory::Scratch, [&] { streaming_attention(q, k, v, m); });
        const std::size_t dense_logits = lq * lkv * 4;
        const double ratio = double(peak) / double(dense_logits);
        ok = ok && ratio <= 0.10;
        detail += fmt::format("{}Lkv={}: scratch {} B = {:.3f}% of dense logits {} B", detail.empty() ? "" : "; ",
                              lkv, peak, 100 * ratio, dense_logits);
    }
    return {ok, detail};
}

// ---------------------------------------------------------------- 4

Outcome inplace_backward() {
    Rng rng(4004);
    auto distribution = [&](std::size_t n, std::size_t v) { return softmax(random_tensor({n, v}, rng, 2.0f), 1); };
    auto mask = [&](std::size_t n) {
        std::vector<std::uint8_t> m(n);
        for (auto& x : m) x = rng.bernoulli(0.7);
        m[rng.below(n)] = 1;
        return m;
    };
    double worst_row_sum = 0.0;
    for (int c = 0; c < 50; ++c) {
        const std::size_t n = 1 + rng.below(48), v = 2 + rng.below(100);
        Tensor z = random_tensor({n, v}, rng, 4.0f), p = distribution(n, v);
        const auto m = mask(n);
        std::vector<float> w(n);
        for (auto& x : w) x = static_cast<float>(rng.uniform() * 2);
        const LossView view{n, v, m, c % 2 ? std::span<const float>(w) : std::span<const float>()};
        const double upstream = 0.5 + rng.uniform();
        const auto ref = loss_backward_reference(z.data(), p.data(), view, upstream);
        auto buf = z.to_vector();
        loss_backward_inplace(buf, p.data(), view, upstream);
        if (buf != ref) return {false, fmt::format("case {}: in-place differs from reference", c)};
        for (std::size_t r = 0; r < n; ++r) {
            double s = 0;
            for (std::size_t i = 0; i < v; ++i) s += buf[r * v + i];
            worst_row_sum = std::max(worst_row_sum, std::fabs(s));
        }
    }
    double worst_fd = 0.0;
    for (int c = 0; c < 20; ++c) {
        const std::size_t n = 1 + rng.below(6), v = 2 + rng.below(7);
        Tensor z = random_tensor({n, v}, rng, 2.0f), p = distribution(n, v);
        const auto m = mask(n);
        auto f = [&](std::vector<Tensor>& in) { return masked_soft_ce(scale(in[0], 1.0f), p, m); };
        worst_fd = std::max(worst_fd, check_gradients(f, {z}).rel_error);
    }
    auto peak_for = [&](std::size_t n) {
        Tensor z = random_tensor({n, 256}, rng), p = distribution(n, 256);
        std::vector<std::uint8_t> m(n, 1);
        auto buf = z.to_vector();
        return meter_scope(AllocCategory::Scratch, [&] { loss_backward_inplace(buf, p.data(), {n, 256, m, {}}); });
    };
    const std::size_t small = peak_for(64), large = peak_for(512);
    const double ratio = small ? double(large) / double(small) : INFINITY;
    const bool ok = worst_fd < 1e-2 && ratio < 1.1 && worst_row_sum <= 1e-6;
    return {ok, fmt::format("50 bitwise matches; FD max rel err {:.2e}; scratch N=64 {} B, N=512 {} B (ratio {:.3f}); "
                            "max |row sum| {:.1e}",
                            worst_fd, small, large, ratio, worst_row_sum)};
}

// ---------------------------------------------------------------- 5

double oracle_expected(double a, std::size_t g) {
    double e = 0.0, pw = 1.0;
    for (std::size_t k = 0; k <= g; ++k, pw *= a) e += pw;
    return e;
}

Outcome speedup_model() {
    const double alphas[] = {0.1, 0.3, 0.5, 0.7, 0.9};
    const std::size_t gammas[] = {1, 2, 4, 6, 8};
    double worst_z = 0.0, worst_closed = 0.0;
    std::uint64_t seed = 5005;
    for (double a : alphas)
        for (std::size_t g : gammas) {
            const double closed = expected_tokens(a, g);
            worst_closed = std::max(worst_closed, std::fabs(closed - oracle_expected(a, g)));
            const auto sim = simulate_cycles(a, g, 1000000, seed++);
            worst_z = std::max(worst_z, std::fabs(sim.mean - closed) / sim.std_error);
        }
    const double e = expected_tokens(0.8, 4), s = speedup(0.8, 4, 0.05);
    const auto sim = simulate_cycles(0.8, 4, 1000000, 77);
    const bool point = std::fabs(e - 3.3616) <= 1e-4 && std::fabs(s - 2.8013) <= 1e-4 &&
                       std::fabs(sim.mean - e) <= 3 * sim.std_error;
    const bool ok = worst_z <= 3.0 && worst_closed < 1e-12 && point;
    return {ok, fmt::format("25 grid cells max |z| {:.2f}; E={:.5f} S={:.5f} (simulated E {:.4f} +- {:.4f})", worst_z,
                            e, s, sim.mean, sim.std_error)};
}

// ---------------------------------------------------------------- 6

Outcome greedy_losslessness() {
    const std::string dir = kSource + "/checkpoints/tiny";
    const RunConfig cfg = load_run_config(dir + "/config.json");
    const TargetModel target = TargetModel::from_tensors(load_tensors(dir + "/target.ckpt"));
    const DraftModel draft = DraftModel::from_tensors(load_tensors(dir + "/draft.ckpt"));
    const auto prompts = make_prompts(cfg.prompt_seed(), 20, cfg.corpus.grammar);
    const std::size_t budget = 64;
    std::vector<std::vector<std::uint32_t>> vanilla;
    for (const auto& p : prompts) vanilla.push_back(vanilla_decode(target, p, budget));
    const SpecConfig configs[] = {{3, 1, 4}, {5, 1, 6}, {5, 3, 6}, {7, 1, 8}, {7, 4, 8}};
    std::string taus;
    for (const auto& sc : configs) {
        AcceptanceStats stats;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            const auto r = spec_decode(target, draft, prompts[i], budget, sc);
            if (r.tokens != vanilla[i])
                return {false, fmt::format("{} prompt {}: output differs from vanilla greedy", sc.label(), i)};
            stats.merge(r.stats);
        }
        taus += fmt::format("{}{} tau {:.2f}", taus.empty() ? "" : ", ", sc.label(), stats.tau());
    }
    return {true, "5 configs x 20 prompts x 64 tokens identical; " + taus};
}

// ---------------------------------------------------------------- 7

/// Output law of one speculative-sampling step by enumerating every
/// proposal and its accept/reject branch.
std::vector<double> enumerate_step(const std::vector<double>& p, const std::vector<double>& q) {
    const std::size_t v = p.size();
    std::vector<double> law(v, 0.0), residual(v);
    double reject = 0.0, rsum = 0.0;
    for (std::size_t x = 0; x < v; ++x) {
        if (q[x] == 0.0) continue;
        const double acc = std::min(1.0, p[x] / q[x]);
        law[x] += q[x] * acc;
        reject += q[x] * (1.0 - acc);
    }
    for (std::size_t y = 0; y < v; ++y) rsum += residual[y] = std::max(0.0, p[y] - q[y]);
    if (rsum > 0)
        for (std::size_t y = 0; y < v; ++y) law[y] += reject * residual[y] / rsum;
    return law;
}

std::vector<double> random_simplex(Rng& rng, std::size_t v, double zero_prob) {
    std::vector<double> x(v);
    double s = 0;
    for (auto& e : x) s += e = rng.bernoulli(zero_prob) ? 0.0 : -std::log(1.0 - rng.uniform());
    if (s == 0) {
        x[rng.below(v)] = 1.0;
        s = 1.0;
    }
    for (auto& e : x) e /= s;
    return x;
}

Outcome stochastic_losslessness() {
    Rng rng(7007);
    double worst = 0.0, worst_lib = 0.0;
    int cases = 0;
    for (std::size_t v = 2; v <= 8; ++v)
        for (int c = 0; c < 200; ++c, ++cases) {
            const auto p = random_simplex(rng, v, 0.2), q = random_simplex(rng, v, 0.2);
            const auto law = enumerate_step(p, q);
            const auto lib = stochastic_step_law(p, q);
            for (std::size_t i = 0; i < v; ++i) {
                worst = std::max(worst, std::fabs(law[i] - p[i]));
                worst_lib = std::max(worst_lib, std::fabs(lib[i] - p[i]));
            }
        }
    const std::vector<double> p = {0.7, 0.3}, q = {0.5, 0.5};
    const std::vector<std::vector<double>> prow = {p, p}, qrow = {q};
    Rng mc(7008);
    const std::size_t n = 100000;
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t x = mc.uniform() < q[0] ? 0 : 1;
        const std::uint32_t proposal[] = {x};
        const auto out = verify_stochastic(prow, qrow, proposal, mc);
        zeros += (out.accepted == 1 ? x : out.token) == 0;
    }
    const double p0 = double(zeros) / double(n), tv = std::fabs(p0 - 0.7);
    const bool ok = worst <= 1e-12 && worst_lib <= 1e-12 && tv <= 0.02;
    return {ok, fmt::format("{} enumerated cases (V=2..8) max err {:.1e} (library law {:.1e}); V=2 Monte Carlo "
                            "P(0)={:.4f}, TV {:.4f}",
                            cases, worst, worst_lib, p0, tv)};
}

// ---------------------------------------------------------------- 8, 9

struct SeedResult {
    double untrained = 0.0;
    std::map<std::size_t, double> tau;  ///< by ttt_len
    double efficacy_seconds = 0.0;       ///< pretrain, ttt 7 training and both benchmarks
};

struct TrainingStudy {
    std::vector<SeedResult> seeds;
    double total_seconds = 0.0;
};

const TrainingStudy& training_study() {
    static const TrainingStudy study = [] {
        TrainingStudy s;
        const auto t_all = Clock::now();
        for (std::uint64_t seed : {1, 2, 3}) {
            RunConfig cfg = parse_run_config(nlohmann::json::object());
            cfg.seed = seed;
            SeedResult r;
            auto t0 = Clock::now();
            const Corpus corpus = make_synthetic_corpus(cfg.corpus_seed(), cfg.corpus.samples, cfg.corpus.grammar);
            Rng init(cfg.target_init_seed());
            auto target = std::make_shared<TargetModel>(cfg.target.model, init);
            PretrainConfig pc = cfg.target.pretrain;
            pc.seed = cfg.pretrain_seed();
            pretrain_target(*target, corpus, pc);
            InProcessEngine engine(target, cfg.engine.max_tokens);
            const auto d2t = build_vocab_map(corpus, cfg.target.model.vocab, cfg.draft.vocab);
            const auto prompts = make_prompts(cfg.prompt_seed(), cfg.specdec.prompts, cfg.corpus.grammar);
            const SpecConfig sc{3, 1, 4};
            auto bench = [&](const DraftModel& d) {
                return run_benchmark(*target, d, prompts, sc, cfg.specdec.max_new, cfg.decode_seed()).stats.tau();
            };
            {
                Rng di(cfg.draft_init_seed());
                r.untrained = bench(DraftModel(cfg.draft, d2t, di));
            }
            r.efficacy_seconds += seconds_since(t0);
            progress(fmt::format("seed {}: target pretrained, untrained draft tau {:.3f}", seed, r.untrained));
            for (std::size_t ttt : {7u, 1u, 3u, 5u}) {
                t0 = Clock::now();
                Rng di(cfg.draft_init_seed());
                DraftModel draft(cfg.draft, d2t, di);
                TrainConfig tc = cfg.train.train;
                tc.ttt_len = ttt;
                tc.seed = cfg.train_seed();
                train_draft(draft, engine, corpus, tc);
                r.tau[ttt] = bench(draft);
                if (ttt == 7) r.efficacy_seconds += seconds_since(t0);
                progress(fmt::format("seed {}: ttt_len {} tau {:.3f} ({:.0f} s)", seed, ttt, r.tau[ttt],
                                     seconds_since(t0)));
            }
            s.seeds.push_back(r);
        }
        s.total_seconds = seconds_since(t_all);
        return s;
    }();
    return study;
}

Outcome training_efficacy() {
    const auto& s = training_study();
    double trained = 0, untrained = 0, secs = 0;
    for (const auto& r : s.seeds) {
        trained += r.tau.at(7) / 3;
        untrained += r.untrained / 3;
        secs += r.efficacy_seconds;
    }
    const double gain = trained - untrained;
    return {gain >= 0.5 && secs < 900,
            fmt::format("(3,1,4) mean tau trained {:.3f} vs untrained {:.3f}, gain {:.3f}; pipeline {:.0f} s", trained,
                        untrained, gain, secs)};
}

Outcome ttt_trend() {
    const auto& s = training_study();
    std::map<std::size_t, double> mean;
    for (const auto& r : s.seeds)
        for (const auto& [ttt, tau] : r.tau) mean[ttt] += tau / double(s.seeds.size());
    std::string per_seed;
    for (std::size_t i = 0; i < s.seeds.size(); ++i)
        per_seed += fmt::format("; seed {}: {:.3f}/{:.3f}/{:.3f}/{:.3f}", i + 1, s.seeds[i].tau.at(1),
                                s.seeds[i].tau.at(3), s.seeds[i].tau.at(5), s.seeds[i].tau.at(7));
    return {mean[3] >= mean[1], fmt::format("mean tau at ttt_len 1/3/5/7: {:.3f}/{:.3f}/{:.3f}/{:.3f}{}", mean[1],
                                            mean[3], mean[5], mean[7], per_seed)};
}

// ---------------------------------------------------------------- 10

Outcome budget_checks() {
    bool ok = true;
    std::string detail;
    const std::size_t d = 32, inter = 96;
    for (std::size_t e : {2u, 3u, 4u}) {
        auto draft_with = [&](FfnVariant variant) {
            DraftConfig c;
            c.vocab = 64;
            c.target_vocab = 128;
            c.d = d;
            c.ffn = {variant, d, inter, e, 1};
            std::vector<std::uint32_t> d2t(64);
            for (std::uint32_t i = 0; i < 64; ++i) d2t[i] = i;
            Rng rng(10010 + e);
            return DraftModel(c, d2t, rng);
        };
        const DraftModel dense = draft_with(FfnVariant::Dense);
        const DraftModel same_params = draft_with(FfnVariant::MoESameParams);
        const DraftModel same_flops = draft_with(FfnVariant::MoESameFlops);
        const FfnCost sp = same_params.ffn.cost(), sf = same_flops.ffn.cost(), dn = dense.ffn.cost();
        // Expert weights of the dense layer: up and down projections.
        const std::size_t dense_ffn = 2 * d * inter;
        const bool params_equal = dn.params == dense_ffn && sp.params == dense_ffn &&
                                  same_params.count_params() - sp.router_params == dense.count_params();
        const bool flops_equal = sf.flops == dn.flops &&
                                 same_flops.count_flops() == dense.count_flops() + sf.router_flops;
        ok = ok && params_equal && flops_equal;
        detail += fmt::format("{}E={}: dense {} params, same-params {} + router {}, same-flops {} vs {} + router {}",
                              detail.empty() ? "" : "; ", e, dense.count_params(), same_params.count_params() - sp.router_params,
                              sp.router_params, same_flops.count_flops(), dense.count_flops(), sf.router_flops);
    }
    return {ok, detail};
}

// ---------------------------------------------------------------- 11

EngineRequest random_request(Rng& rng, std::size_t vocab, std::size_t max_len) {
    EngineRequest r;
    r.id = rng.next_u64();
    r.flags = static_cast<std::uint8_t>(rng.below(4));
    r.tokens.resize(1 + rng.below(max_len));
    for (auto& t : r.tokens) t = static_cast<std::uint32_t>(rng.below(vocab));
    return r;
}

Outcome engine_decoupling() {
    const std::string dir = kSource + "/checkpoints/tiny";
    auto model = std::make_shared<TargetModel>(TargetModel::from_tensors(load_tensors(dir + "/target.ckpt")));
    auto engine = std::make_shared<InProcessEngine>(model);
    const std::size_t vocab = model->config().vocab;
    Rng rng(11011);

    EngineServer server(engine, {"127.0.0.1", 0, 4, kDefaultMaxFrame});
    server.start();
    {
        SocketEngine client("127.0.0.1", server.port());
        for (int i = 0; i < 100; ++i) {
            const auto req = random_request(rng, vocab, 64);
            if (encode_response(client.query(req)) != encode_response(engine->query(req)))
                return {false, fmt::format("request {}: socket payload differs", i)};
        }
    }

    for (int i = 0; i < 1000; ++i) {
        EngineRequest req;
        req.id = rng.next_u64();
        req.flags = static_cast<std::uint8_t>(rng.below(256));
        req.tokens.resize(rng.below(64));
        for (auto& t : req.tokens) t = static_cast<std::uint32_t>(rng.next_u64());
        EngineResponse resp;
        resp.id = rng.next_u64();
        resp.status = static_cast<EngineStatus>(rng.below(3));
        auto block = [&] {
            PayloadBlock b{static_cast<std::uint32_t>(rng.below(8)), static_cast<std::uint32_t>(rng.below(8)), {}};
            b.values.resize(std::size_t(b.rows) * b.cols);
            for (auto& v : b.values) v = static_cast<float>(rng.normal() * 1e3);
            return b;
        };
        if (rng.bernoulli(0.5)) resp.logits = block();
        if (rng.bernoulli(0.5)) resp.fused = block();
        const auto bytes = encode_response(resp);
        if (!(decode_request(encode_request(req)) == req) || !(decode_response(bytes) == resp) ||
            encode_response(decode_response(bytes)) != bytes)
            return {false, fmt::format("message {}: round trip failed", i)};
    }

    const std::size_t clients = 4, per_client = 25;
    std::vector<std::vector<std::uint64_t>> ids(clients);
    std::vector<int> mismatches(clients, 0);
    std::vector<std::thread> threads;
    for (std::size_t c = 0; c < clients; ++c)
        threads.emplace_back([&, c] {
            SocketEngine client("127.0.0.1", server.port());
            Rng local(500 + c);
            for (std::size_t i = 0; i < per_client; ++i) {
                auto req = random_request(local, vocab, 24);
                req.id = 1000 * (c + 1) + i;
                const auto resp = client.query(req);
                ids[c].push_back(resp.id);
                if (encode_response(resp) != encode_response(engine->query(req))) ++mismatches[c];
            }
        });
    for (auto& t : threads) t.join();
    server.stop();
    for (std::size_t c = 0; c < clients; ++c)
        for (std::size_t i = 0; i < per_client; ++i)
            if (ids[c][i] != 1000 * (c + 1) + i || mismatches[c])
                return {false, fmt::format("client {}: response order or payload broken", c)};
    return {true, "100 socket/in-process payloads identical; 1000 round trips; 4 concurrent clients x 25 in order"};
}

// ---------------------------------------------------------------- 12

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / ("speclab_accept_" + std::to_string(::getpid()));
    fs::remove_all(root);
    const std::string config = kSource + "/configs/tiny.json";
    std::ostringstream sink;
    auto run_once = [&](const std::string& d) {
        const std::vector<std::vector<std::string>> steps = {
            {"gen-corpus", "--config", config, "--out", d + "/corpus"},
            {"pretrain-target", "--config", config, "--corpus", d + "/corpus/corpus.jsonl", "--out", d + "/target"},
            {"train-draft", "--config", config, "--corpus", d + "/corpus/corpus.jsonl", "--target",
             d + "/target/target.ckpt", "--out", d + "/draft"},
            {"bench", "--config", config, "--target", d + "/target/target.ckpt", "--draft", d + "/draft/draft.ckpt",
             "--out", d + "/bench"}};
        for (const auto& s : steps)
            if (cli::run(s, sink, sink) != 0) return false;
        return true;
    };
    const std::string a = (root / "a").string(), b = (root / "b").string();
    if (!run_once(a) || !run_once(b)) {
        fs::remove_all(root);
        return {false, "pipeline command failed: " + sink.str()};
    }
    const char* files[] = {"target/pretrain.jsonl", "draft/metrics.jsonl", "bench/bench.csv", "target/target.ckpt",
                           "draft/draft.ckpt"};
    std::string detail;
    bool ok = true;
    std::size_t lines = 0;
    for (const char* f : files) {
        const std::string x = slurp(a + "/" + f), y = slurp(b + "/" + f);
        if (x.empty() || x != y) {
            ok = false;
            detail += fmt::format(" {} differs;", f);
        }
        if (std::string(f) == "draft/metrics.jsonl") lines = std::count(x.begin(), x.end(), '\n');
    }
    fs::remove_all(root);
    return {ok, ok ? fmt::format("two pipeline runs byte-identical ({} metrics lines, checkpoints, bench CSV)", lines)
                   : detail};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
    double limit_seconds;  ///< 0 = none
};

}  // namespace
}  // namespace speclab

int main(int argc, char** argv) {
    using namespace speclab;
    ::setenv("SPECLAB_LOG", "warn", 0);
    spdlog::set_level(spdlog::level::warn);
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    const std::vector<Criterion> criteria = {
        {1, "mask oracle", mask_oracle, 10},
        {2, "attention equivalence", attention_equivalence, 60},
        {3, "memory property", memory_property, 60},
        {4, "in-place backward", inplace_backward, 0},
        {5, "speedup model", speedup_model, 30},
        {6, "greedy losslessness", greedy_losslessness, 120},
        {7, "stochastic losslessness", stochastic_losslessness, 0},
        {8, "training efficacy", training_efficacy, 0},
        {9, "ttt length trend", ttt_trend, 0},
        {10, "budget checks", budget_checks, 0},
        {11, "engine decoupling", engine_decoupling, 0},
        {12, "determinism", determinism, 0},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        if (c.limit_seconds > 0 && secs >= c.limit_seconds) {
            o.pass = false;
            o.detail += fmt::format("; runtime {:.1f} s exceeds {:.0f} s", secs, c.limit_seconds);
        }
        failed += !o.pass;
        std::printf("%s  %2d %-24s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
