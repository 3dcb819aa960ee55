// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>

#include "speclab/error.hpp"
#include "speclab/loss.hpp"

namespace speclab {

// ----- optimisation -----

AdamW::AdamW(NamedTensors params, const AdamWConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto& [name, t] : params_) {
        m_.emplace_back(t.numel(), 0.0f);
        v_.emplace_back(t.numel(), 0.0f);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.data();
        auto& m = m_[i];
        auto& v = v_[i];
        const double decay = p.rank() >= 2 ? cfg_.weight_decay : 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k];
            const double mk = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
            const double vk = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            const double upd = (mk / bc1) / (std::sqrt(vk / bc2) + cfg_.eps);
            w[k] = static_cast<float>(w[k] - lr * (upd + decay * w[k]));
        }
        p.zero_grad();
    }
}

double lr_at(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
    if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(1, total - std::min(total, warmup)));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed * 0x9e3779b97f4a7c15ULL + epoch + 1);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

// ----- vocabulary -----

std::vector<std::uint32_t> build_vocab_map(const Corpus& corpus, std::size_t target_vocab, std::size_t draft_vocab) {
    if (draft_vocab == 0 || draft_vocab > target_vocab)
        throw InvalidArgument("vocab map: need 0 < draft_vocab <= target_vocab");
    std::vector<std::size_t> freq(target_vocab, 0);
    for (const auto& s : corpus.samples)
        for (auto t : s.tokens) {
            if (t >= target_vocab) throw IndexError("vocab map: token " + std::to_string(t) + " out of range");
            ++freq[t];
        }
    std::vector<std::uint32_t> ids(target_vocab);
    std::iota(ids.begin(), ids.end(), 0u);
    std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return freq[a] > freq[b]; });
    ids.resize(draft_vocab);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ----- target -----

namespace {

void check_common(std::size_t epochs, std::size_t batch, double lr, double warmup, std::size_t q_len,
                  std::size_t block, const AdamWConfig& a, const char* what) {
    const std::string w = what;
    if (epochs == 0) throw InvalidArgument(w + ": epochs must be positive");
    if (batch == 0) throw InvalidArgument(w + ": batch_size must be positive");
    if (!(lr > 0)) throw InvalidArgument(w + ": lr must be positive");
    if (warmup < 0 || warmup > 1) throw InvalidArgument(w + ": warmup_frac must lie in [0, 1]");
    MaskParams{q_len, q_len, 0, block}.validate();
    if (!(a.beta1 >= 0 && a.beta1 < 1 && a.beta2 >= 0 && a.beta2 < 1 && a.eps > 0 && a.weight_decay >= 0))
        throw InvalidArgument(w + ": invalid AdamW settings");
}

std::vector<std::uint32_t> iota_u32(std::size_t n) {
    std::vector<std::uint32_t> v(n);
    std::iota(v.begin(), v.end(), 0u);
    return v;
}

void check_finite(double loss, std::size_t step, const char* what) {
    if (!std::isfinite(loss))
        throw DivergenceError(std::string(what) + ": non-finite loss " + std::to_string(loss) + " at step " +
                              std::to_string(step));
}

}  // namespace

void PretrainConfig::validate() const { check_common(epochs, batch_size, lr, warmup_frac, q_len, block, adamw, "pretrain"); }

void pretrain_target(TargetModel& model, const Corpus& corpus, const PretrainConfig& cfg,
                     const std::function<void(std::size_t, double)>& on_step) {
    cfg.validate();
    const std::size_t n = corpus.samples.size();
    const std::size_t q = cfg.q_len;
    const std::size_t vocab = model.config().vocab;
    const std::size_t heads = model.config().heads;
    const auto positions = iota_u32(q);
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.epochs;
    const auto warmup = static_cast<std::size_t>(std::llround(cfg.warmup_frac * static_cast<double>(total)));
    AdamW opt(model.parameters(), cfg.adamw);

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(n, cfg.seed, epoch);
        for (std::size_t b = 0; b < n; b += cfg.batch_size) {
            const std::size_t e = std::min(n, b + cfg.batch_size);
            double batch_loss = 0.0;
            for (std::size_t i = b; i < e; ++i) {
                const Sample& s = corpus.samples[order[i]];
                const std::size_t T = s.tokens.size();
                if (T < 2 || T > q) throw InvalidArgument("pretrain: sample length must lie in [2, q_len]");
                std::vector<std::uint32_t> toks(q, kPadToken);
                std::copy(s.tokens.begin(), s.tokens.end(), toks.begin());
                const BlockMask mask(MaskParams{q, T, 0, cfg.block});
                AttnFn fn = [&mask, heads](std::size_t, const Tensor& qq, const Tensor& k, const Tensor& v) {
                    return streaming_attention(qq, k, v, mask, heads);
                };
                const auto out = model.forward(toks, positions, fn);
                Tensor target({q, vocab});
                std::vector<std::uint8_t> valid(q, 0);
                for (std::size_t t = 0; t + 1 < T; ++t) {
                    target.at(t, s.tokens[t + 1]) = 1.0f;
                    valid[t] = 1;
                }
                Tensor loss = masked_soft_ce(out.logits, target, valid);
                const double lv = loss.item();
                check_finite(lv, step, "pretrain");
                batch_loss += lv;
                backward(scale(loss, 1.0f / static_cast<float>(e - b)));
            }
            opt.step(lr_at(step, total, warmup, cfg.lr));
            if (on_step) on_step(step, batch_loss / static_cast<double>(e - b));
            ++step;
        }
    }
}

double perplexity(const TargetModel& model, const Corpus& corpus) {
    NoGradGuard ng;
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& s : corpus.samples) {
        if (s.tokens.size() < 2) continue;
        const auto out = model.forward_causal(s.tokens);
        const std::size_t V = out.logits.cols();
        const auto z = out.logits.data();
        for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
            const float* row = z.data() + t * V;
            const double m = *std::max_element(row, row + V);
            double l = 0.0;
            for (std::size_t v = 0; v < V; ++v) l += std::exp(row[v] - m);
            nll += m + std::log(l) - row[s.tokens[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw InvalidArgument("perplexity: corpus has no next-token pairs");
    return std::exp(nll / static_cast<double>(count));
}

namespace {

std::uint32_t sample_logits(std::span<const float> row, double temperature, Rng& rng) {
    if (temperature <= 0.0)
        return static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const double m = *std::max_element(row.begin(), row.end());
    std::vector<double> w(row.size());
    double z = 0.0;
    for (std::size_t v = 0; v < row.size(); ++v) z += w[v] = std::exp((row[v] - m) / temperature);
    double u = rng.uniform() * z;
    for (std::size_t v = 0; v < row.size(); ++v) {
        u -= w[v];
        if (u < 0) return static_cast<std::uint32_t>(v);
    }
    return static_cast<std::uint32_t>(row.size() - 1);
}

EngineResponse checked_query(EngineBackend& engine, EngineRequest req) {
    auto r = engine.query(req);
    if (r.status != EngineStatus::Ok)
        throw Error("engine rejected request " + std::to_string(req.id) + " with status " +
                    std::to_string(static_cast<int>(r.status)));
    return r;
}

}  // namespace

Corpus regenerate_corpus(EngineBackend& engine, const Corpus& corpus, double temperature, std::uint64_t seed) {
    if (temperature < 0) throw InvalidArgument("regenerate: temperature must be >= 0");
    Rng rng(seed);
    Corpus out{corpus.grammar, {}};
    std::uint64_t id = 0;
    for (const auto& s : corpus.samples) {
        const std::size_t plen = s.prompt_len();
        Sample r{{s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(plen)}, s.loss_mask};
        while (r.tokens.size() < s.tokens.size()) {
            const auto resp = checked_query(engine, {id++, kWantLogits, r.tokens});
            const auto& lg = *resp.logits;
            const std::span<const float> last(lg.values.data() + (lg.rows - 1) * std::size_t(lg.cols), lg.cols);
            r.tokens.push_back(sample_logits(last, temperature, rng));
        }
        out.samples.push_back(std::move(r));
    }
    return out;
}

// ----- draft -----

void TrainConfig::validate() const {
    check_common(epochs, batch_size, lr, warmup_frac, q_len, block, adamw, "train");
    if (ttt_len == 0) throw InvalidArgument("train: ttt_len must be positive");
    if (!step_weights.empty() && step_weights.size() != ttt_len)
        throw InvalidArgument("train: step_weights must have ttt_len entries");
    for (double w : step_weights)
        if (!(w >= 0) || !std::isfinite(w)) throw InvalidArgument("train: step weights must be finite and >= 0");
    if (!(regen_temperature > 0)) throw InvalidArgument("train: regen_temperature must be positive");
}

DraftExample prepare_example(EngineBackend& engine, const Sample& sample, std::span<const std::uint32_t> d2t,
                             std::uint64_t request_id) {
    const auto resp = checked_query(engine, {request_id, kWantLogits | kWantFused, sample.tokens});
    NoGradGuard ng;
    const Tensor logits({resp.logits->rows, resp.logits->cols}, resp.logits->values);
    return {sample.tokens, sample.loss_mask, Tensor({resp.fused->rows, resp.fused->cols}, resp.fused->values),
            topk_distill_target(logits, d2t)};
}

UnrollResult unroll(const DraftModel& draft, const DraftExample& ex, const TrainConfig& cfg) {
    const std::size_t Q = cfg.q_len;
    const std::size_t T = ex.tokens.size();
    if (T == 0 || T > Q) throw InvalidArgument("unroll: sample length must lie in [1, q_len]");
    const std::size_t V = draft.config().vocab;
    const std::size_t F = ex.fused.cols();
    const auto& d2t = draft.vocab_map();

    Tensor input({Q, F});
    std::copy(ex.fused.data().begin(), ex.fused.data().end(), input.data().begin());
    const auto positions = iota_u32(Q);

    UnrollResult res;
    TTTState state;
    std::vector<std::uint32_t> prev_argmax(Q, 0);
    for (std::size_t j = 0; j < cfg.ttt_len; ++j) {
        std::vector<std::uint32_t> toks(Q, kPadToken);
        std::vector<std::uint8_t> valid(Q, 0);
        Tensor label({Q, V});
        std::size_t rows = 0;
        for (std::size_t t = 0; t + j + 1 < T; ++t) {
            const std::size_t src = t + j + 1;
            toks[t] = cfg.sampled_tokens && j > 0 ? d2t[prev_argmax[t]] : ex.tokens[src];
            if (!ex.loss_mask[src]) continue;
            valid[t] = 1;
            ++rows;
            std::copy_n(ex.target.data().begin() + static_cast<std::ptrdiff_t>(src * V), V,
                        label.data().begin() + static_cast<std::ptrdiff_t>(t * V));
        }
        const BlockMask mask(MaskParams{Q, T, j, cfg.block});
        DraftStep out = draft.ttt_forward(input, toks, positions, state, mask);

        const auto z = out.logits.data();
        std::size_t agree = 0;
        for (std::size_t t = 0; t < Q; ++t) {
            const float* row = z.data() + t * V;
            prev_argmax[t] = static_cast<std::uint32_t>(std::max_element(row, row + V) - row);
            if (!valid[t]) continue;
            const float* lab = label.data().data() + t * V;
            agree += prev_argmax[t] == static_cast<std::uint32_t>(std::max_element(lab, lab + V) - lab);
        }
        res.step_rows.push_back(rows);
        if (rows == 0) {
            res.step_loss.push_back(std::nan(""));
            res.step_top1.push_back(std::nan(""));
        } else {
            Tensor lj = masked_soft_ce(out.logits, label, valid);
            res.step_loss.push_back(lj.item());
            res.step_top1.push_back(static_cast<double>(agree) / static_cast<double>(rows));
            Tensor wl = scale(lj, static_cast<float>(cfg.weight(j)));
            res.loss = res.loss.defined() ? add(res.loss, wl) : wl;
        }
        input = out.features;
    }
    if (!res.loss.defined()) res.loss = Tensor::scalar(0.0f);
    return res;
}

std::vector<StepMetrics> train_draft(DraftModel& draft, EngineBackend& engine, const Corpus& source,
                                     const TrainConfig& cfg, std::ostream* metrics) {
    cfg.validate();
    const Corpus corpus =
        cfg.regenerate_data ? regenerate_corpus(engine, source, cfg.regen_temperature, cfg.seed + 0x5eed) : source;
    const std::size_t n = corpus.samples.size();
    if (n == 0) throw InvalidArgument("train: empty corpus");
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.epochs;
    const auto warmup = static_cast<std::size_t>(std::llround(cfg.warmup_frac * static_cast<double>(total)));
    AdamW opt(draft.parameters(), cfg.adamw);
    std::vector<StepMetrics> history;
    std::uint64_t request_id = 0;
    const std::size_t J = cfg.ttt_len;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(n, cfg.seed, epoch);
        for (std::size_t b = 0; b < n; b += cfg.batch_size) {
            const std::size_t e = std::min(n, b + cfg.batch_size);
            const double lr = lr_at(step, total, warmup, cfg.lr);
            std::vector<double> loss_sum(J, 0.0), loss_cnt(J, 0.0), agree(J, 0.0), rows(J, 0.0);
            for (std::size_t i = b; i < e; ++i) {
                const auto ex = prepare_example(engine, corpus.samples[order[i]], draft.vocab_map(), request_id++);
                auto r = unroll(draft, ex, cfg);
                check_finite(r.loss.item(), step, "train");
                for (std::size_t j = 0; j < J; ++j) {
                    if (r.step_rows[j] == 0) continue;
                    loss_sum[j] += r.step_loss[j];
                    loss_cnt[j] += 1;
                    agree[j] += r.step_top1[j] * static_cast<double>(r.step_rows[j]);
                    rows[j] += static_cast<double>(r.step_rows[j]);
                }
                backward(scale(r.loss, 1.0f / static_cast<float>(e - b)));
            }
            opt.step(lr);

            StepMetrics m{step, lr, {}, {}};
            for (std::size_t j = 0; j < J; ++j) {
                m.loss_per_ttt_step.push_back(loss_cnt[j] > 0 ? loss_sum[j] / loss_cnt[j] : std::nan(""));
                m.top1_agreement.push_back(rows[j] > 0 ? agree[j] / rows[j] : std::nan(""));
            }
            if (metrics) {
                *metrics << nlohmann::json{{"step", m.step},
                                           {"lr", m.lr},
                                           {"loss_per_ttt_step", m.loss_per_ttt_step},
                                           {"top1_agreement", m.top1_agreement}}
                                .dump()
                         << '\n';
            }
            if (step % 50 == 0)
                spdlog::debug("draft step {} lr {:.3e} loss[0] {:.4f} top1[0] {:.3f}", step, lr,
                              m.loss_per_ttt_step[0], m.top1_agreement[0]);
            history.push_back(std::move(m));
            ++step;
        }
    }
    return history;
}

}  // namespace speclab
