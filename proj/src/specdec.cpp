// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/specdec.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "speclab/analytics.hpp"
#include "speclab/error.hpp"

namespace speclab {

const char* to_string(DecodeMode m) { return m == DecodeMode::Greedy ? "greedy" : "stochastic"; }

DecodeMode parse_decode_mode(const std::string& s) {
    if (s == "greedy") return DecodeMode::Greedy;
    if (s == "stochastic") return DecodeMode::Stochastic;
    throw InvalidArgument("unknown decode mode '" + s + "'");
}

void SpecConfig::validate() const {
    if (steps == 0) throw InvalidArgument("specdec: steps must be >= 1");
    if (topk == 0) throw InvalidArgument("specdec: topk must be >= 1");
    if (draft_tokens < 2) throw InvalidArgument("specdec: draft_tokens must be >= 2 (root plus one proposal)");
    if (mode == DecodeMode::Stochastic) {
        if (topk != 1) throw InvalidArgument("specdec: stochastic verification needs topk == 1");
        if (!(temperature > 0) || !std::isfinite(temperature))
            throw InvalidArgument("specdec: temperature must be positive");
    }
}

std::string SpecConfig::label() const { return fmt::format("({},{},{})", steps, topk, draft_tokens); }

// ----- trees -----

void DraftTree::validate(std::size_t max_nodes) const {
    if (nodes.empty() || nodes[0].parent != -1 || nodes[0].depth != 0)
        throw InternalError("draft tree: node 0 must be a depth-0 root");
    if (nodes.size() > max_nodes) throw InternalError("draft tree: too many nodes");
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        const auto p = nodes[i].parent;
        if (p < 0 || static_cast<std::size_t>(p) >= i) throw InternalError("draft tree: parent must precede child");
        if (nodes[i].depth != nodes[static_cast<std::size_t>(p)].depth + 1)
            throw InternalError("draft tree: depth must be parent depth + 1");
    }
}

std::vector<std::uint8_t> DraftTree::ancestor_mask() const {
    const std::size_t n = nodes.size();
    std::vector<std::uint8_t> m(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::int32_t a = static_cast<std::int32_t>(i); a >= 0; a = nodes[static_cast<std::size_t>(a)].parent)
            m[i * n + static_cast<std::size_t>(a)] = 1;
    return m;
}

DraftTree select_tree(const TreeNode& root, const std::vector<TreeNode>& pool, std::size_t keep) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto &x = pool[a], &y = pool[b];
        if (x.logp != y.logp) return x.logp > y.logp;
        if (x.depth != y.depth) return x.depth < y.depth;
        if (x.token != y.token) return x.token < y.token;
        if (x.parent != y.parent) return x.parent < y.parent;
        return a < b;
    });
    idx.resize(std::min(keep, idx.size()));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return pool[a].depth != pool[b].depth ? pool[a].depth < pool[b].depth : a < b;
    });
    std::vector<std::int32_t> where(pool.size(), -1);
    DraftTree tree{{root}};
    tree.nodes[0].parent = -1;
    tree.nodes[0].depth = 0;
    for (std::size_t i : idx) {
        TreeNode n = pool[i];
        if (n.parent >= 0) {
            n.parent = where[static_cast<std::size_t>(n.parent)];
            if (n.parent < 0) throw InternalError("select_tree: selection is not closed under ancestors");
        } else {
            n.parent = 0;
        }
        where[i] = static_cast<std::int32_t>(tree.nodes.size());
        tree.nodes.push_back(n);
    }
    return tree;
}

namespace {

std::uint32_t argmax_row(std::span<const float> row) {
    return static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::span<const float> row_of(const Tensor& t, std::size_t r) { return t.data().subspan(r * t.cols(), t.cols()); }

std::uint32_t sample_index(std::span<const double> w, Rng& rng) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0)) throw InternalError("sampling from an all-zero distribution");
    double u = rng.uniform() * total;
    std::size_t last = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0) continue;
        last = i;
        u -= w[i];
        if (u < 0) return static_cast<std::uint32_t>(i);
    }
    return static_cast<std::uint32_t>(last);
}

std::vector<double> log_softmax(std::span<const float> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (float v : z) s += std::exp(v - m);
    const double ls = std::log(s);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - m) - ls;
    return out;
}

/// Draft rows for one decode state: the context rows plus one row per
/// expanded tree node. Every evaluation recomputes all rows; dense
/// attention makes the earlier rows reproduce exactly.
class DraftRunner {
public:
    DraftRunner(const DraftModel& draft, const Tensor& features, std::span<const std::uint32_t> seq)
        : draft_(draft), ctx_(seq.size() - 1), d_(draft.config().d) {
        if (seq.size() < 2) throw InvalidArgument("draft: context needs at least two tokens");
        if (features.rank() != 2 || features.rows() != ctx_)
            throw DimensionError("draft: expected features for " + std::to_string(ctx_) + " context tokens");
        const Tensor h = draft.fuse(features);
        hidden_.assign(h.data().begin(), h.data().end());
        for (std::size_t t = 0; t < ctx_; ++t) {
            tokens_.push_back(seq[t + 1]);
            positions_.push_back(static_cast<std::uint32_t>(t));
            ancestors_.emplace_back();
        }
    }

    std::size_t tip() const { return ctx_ - 1; }

    /// Adds a node row reading `token` with the features of `parent_row`.
    std::size_t add_row(std::size_t parent_row, std::uint32_t token) {
        const std::size_t r = tokens_.size();
        auto anc = parent_row >= ctx_ ? ancestors_[parent_row] : std::vector<std::size_t>{};
        if (parent_row >= ctx_) anc.push_back(parent_row);
        ancestors_.push_back(std::move(anc));
        tokens_.push_back(token);
        positions_.push_back(static_cast<std::uint32_t>(tip()));
        const auto f = row_of(features_, parent_row);
        hidden_.insert(hidden_.end(), f.begin(), f.end());
        return r;
    }

    void evaluate() {
        const std::size_t R = tokens_.size();
        std::vector<std::uint8_t> mask(R * R, 0);
        for (std::size_t r = 0; r < R; ++r) {
            if (r < ctx_) {
                for (std::size_t c = 0; c <= r; ++c) mask[r * R + c] = 1;
            } else {
                for (std::size_t c = 0; c < ctx_; ++c) mask[r * R + c] = 1;
                for (std::size_t a : ancestors_[r]) mask[r * R + a] = 1;
                mask[r * R + r] = 1;
            }
        }
        const std::size_t heads = draft_.config().heads;
        AttnFn fn = [&mask, heads](std::size_t, const Tensor& q, const Tensor& k, const Tensor& v) {
            return dense_masked_attention(q, k, v, mask, heads);
        };
        const Tensor hidden({R, d_}, hidden_);
        auto out = draft_.step(hidden, tokens_, positions_, fn);
        logits_ = out.logits;
        features_ = out.features;
    }

    std::span<const float> logits(std::size_t row) const { return row_of(logits_, row); }

private:
    const DraftModel& draft_;
    std::size_t ctx_, d_;
    std::vector<float> hidden_;
    std::vector<std::uint32_t> tokens_, positions_;
    std::vector<std::vector<std::size_t>> ancestors_;
    Tensor logits_, features_;
};

}  // namespace

std::vector<double> tempered_softmax(std::span<const float> logits, double temperature) {
    if (!(temperature > 0)) throw InvalidArgument("tempered_softmax: temperature must be positive");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp((logits[i] - m) / temperature);
    for (auto& v : p) v /= s;
    return p;
}

DraftTree draft_propose(const DraftModel& draft, const Tensor& features, std::span<const std::uint32_t> seq,
                        const SpecConfig& cfg, std::size_t max_steps) {
    cfg.validate();
    NoGradGuard ng;
    const TreeNode root{seq.back(), -1, 0, 0.0};
    const std::size_t depth = std::min({cfg.steps, max_steps, cfg.draft_tokens - 1});
    if (depth == 0) return DraftTree{{root}};

    DraftRunner runner(draft, features, seq);
    const auto& d2t = draft.vocab_map();
    std::vector<TreeNode> pool;
    // Frontier entries: (pool index or -1 for the root, draft row).
    std::vector<std::pair<std::int32_t, std::size_t>> frontier{{-1, runner.tip()}};
    for (std::size_t level = 1; level <= depth; ++level) {
        runner.evaluate();
        const std::size_t first = pool.size();
        for (auto [node, row] : frontier) {
            const auto lp = log_softmax(runner.logits(row));
            std::vector<std::uint32_t> ids(lp.size());
            std::iota(ids.begin(), ids.end(), 0u);
            const std::size_t k = std::min(cfg.topk, ids.size());
            std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                              [&](auto a, auto b) { return lp[a] != lp[b] ? lp[a] > lp[b] : d2t[a] < d2t[b]; });
            const double base = node < 0 ? 0.0 : pool[static_cast<std::size_t>(node)].logp;
            for (std::size_t i = 0; i < k; ++i)
                pool.push_back({d2t[ids[i]], node, static_cast<std::uint32_t>(level), base + lp[ids[i]]});
        }
        if (level == depth) break;
        std::vector<std::size_t> order(pool.size() - first);
        std::iota(order.begin(), order.end(), first);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const auto &x = pool[a], &y = pool[b];
            if (x.logp != y.logp) return x.logp > y.logp;
            if (x.token != y.token) return x.token < y.token;
            return x.parent < y.parent;
        });
        order.resize(std::min(cfg.topk, order.size()));
        std::vector<std::pair<std::int32_t, std::size_t>> next;
        for (std::size_t i : order) {
            const auto parent = pool[i].parent;
            std::size_t parent_row = runner.tip();
            for (auto [n, r] : frontier)
                if (n == parent) parent_row = r;
            next.emplace_back(static_cast<std::int32_t>(i), runner.add_row(parent_row, pool[i].token));
        }
        frontier = std::move(next);
    }
    auto tree = select_tree(root, pool, cfg.draft_tokens - 1);
    tree.validate(cfg.draft_tokens);
    return tree;
}

std::vector<std::uint32_t> draft_sample_chain(const DraftModel& draft, const Tensor& features,
                                              std::span<const std::uint32_t> seq, std::size_t max_steps,
                                              double temperature, Rng& rng, std::vector<std::vector<double>>& q) {
    NoGradGuard ng;
    q.clear();
    std::vector<std::uint32_t> chain;
    if (max_steps == 0) return chain;
    DraftRunner runner(draft, features, seq);
    const auto& d2t = draft.vocab_map();
    const std::size_t vt = draft.config().target_vocab;
    std::size_t row = runner.tip();
    for (std::size_t s = 0; s < max_steps; ++s) {
        runner.evaluate();
        const auto pd = tempered_softmax(runner.logits(row), temperature);
        std::vector<double> qt(vt, 0.0);
        for (std::size_t i = 0; i < pd.size(); ++i) qt[d2t[i]] += pd[i];
        const std::uint32_t x = d2t[sample_index(pd, rng)];
        chain.push_back(x);
        q.push_back(std::move(qt));
        if (s + 1 < max_steps) row = runner.add_row(row, x);
    }
    return chain;
}

// ----- verification -----

TargetOutput target_tree_forward(const TargetModel& target, const DraftTree& tree, std::span<const std::uint32_t> seq) {
    const std::size_t n = seq.size();
    const std::size_t m = tree.nodes.size();
    if (n == 0 || m == 0) throw InvalidArgument("target_tree_forward: empty context or tree");
    const std::size_t L = n + m - 1;
    std::vector<std::uint32_t> tokens(seq.begin(), seq.end()), pos(L);
    std::iota(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n), 0u);
    for (std::size_t i = 1; i < m; ++i) {
        tokens.push_back(tree.nodes[i].token);
        pos[n - 1 + i] = static_cast<std::uint32_t>(n - 1 + tree.nodes[i].depth);
    }
    const auto anc = tree.ancestor_mask();
    std::vector<std::uint8_t> mask(L * L, 0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c <= r; ++c) mask[r * L + c] = 1;
    for (std::size_t i = 1; i < m; ++i) {
        const std::size_t r = n - 1 + i;
        for (std::size_t c = 0; c < n; ++c) mask[r * L + c] = 1;
        for (std::size_t j = 1; j < m; ++j)
            if (anc[i * m + j]) mask[r * L + n - 1 + j] = 1;
    }
    const std::size_t heads = target.config().heads;
    AttnFn fn = [&mask, heads](std::size_t, const Tensor& q, const Tensor& k, const Tensor& v) {
        return dense_masked_attention(q, k, v, mask, heads);
    };
    NoGradGuard ng;
    return target.forward(tokens, pos, fn);
}

VerifyOutput verify_greedy(const TargetModel& target, const DraftTree& tree, std::span<const std::uint32_t> seq) {
    tree.validate(std::numeric_limits<std::size_t>::max());
    const auto out = target_tree_forward(target, tree, seq);
    const std::size_t n = seq.size();
    auto row = [n](std::size_t node) { return n - 1 + node; };
    VerifyOutput v;
    std::size_t cur = 0;
    for (;;) {
        const std::uint32_t want = argmax_row(row_of(out.logits, row(cur)));
        std::size_t next = 0;
        for (std::size_t i = cur + 1; i < tree.nodes.size(); ++i)
            if (tree.nodes[i].parent == static_cast<std::int32_t>(cur) && tree.nodes[i].token == want) {
                next = i;
                break;
            }
        if (next == 0) {
            v.bonus = want;
            break;
        }
        v.accepted.push_back(next);
        cur = next;
    }
    v.fused = out.fused;
    return v;
}

ChainOutcome verify_stochastic(std::span<const std::vector<double>> p, std::span<const std::vector<double>> q,
                               std::span<const std::uint32_t> proposals, Rng& rng) {
    const std::size_t k = proposals.size();
    if (q.size() != k || p.size() != k + 1) throw DimensionError("verify_stochastic: need k q rows and k+1 p rows");
    for (std::size_t i = 0; i < k; ++i) {
        const std::uint32_t x = proposals[i];
        if (x >= q[i].size() || x >= p[i].size()) throw IndexError("verify_stochastic: proposal out of range");
        if (q[i][x] <= 0) throw InternalError("verify_stochastic: proposed token has zero draft probability");
        if (rng.uniform() < std::min(1.0, p[i][x] / q[i][x])) continue;
        std::vector<double> r(p[i].size());
        for (std::size_t y = 0; y < r.size(); ++y) r[y] = std::max(0.0, p[i][y] - q[i][y]);
        return {i, sample_index(r, rng)};
    }
    return {k, sample_index(p[k], rng)};
}

std::vector<double> stochastic_step_law(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw DimensionError("stochastic_step_law: p and q differ in size");
    const std::size_t V = p.size();
    std::vector<double> resid(V);
    double rsum = 0.0;
    for (std::size_t y = 0; y < V; ++y) rsum += resid[y] = std::max(0.0, p[y] - q[y]);
    std::vector<double> out(V, 0.0);
    for (std::size_t x = 0; x < V; ++x) {
        if (q[x] <= 0) continue;
        const double accept = std::min(1.0, p[x] / q[x]);
        out[x] += q[x] * accept;
        const double reject = q[x] * (1.0 - accept);
        if (reject > 0)
            for (std::size_t y = 0; y < V; ++y) out[y] += reject * resid[y] / rsum;
    }
    return out;
}

// ----- statistics -----

double AcceptanceStats::tau() const {
    return cycles == 0 ? 0.0 : static_cast<double>(emitted) / static_cast<double>(cycles);
}

void AcceptanceStats::merge(const AcceptanceStats& o) {
    cycles += o.cycles;
    proposed += o.proposed;
    accepted += o.accepted;
    emitted += o.emitted;
    if (accept_hist.size() < o.accept_hist.size()) accept_hist.resize(o.accept_hist.size(), 0);
    for (std::size_t i = 0; i < o.accept_hist.size(); ++i) accept_hist[i] += o.accept_hist[i];
}

void AcceptanceStats::check() const {
    if (accepted > proposed) throw InternalError("stats: accepted exceeds proposed");
    if (accepted + cycles != emitted) throw InternalError("stats: accepted + cycles != emitted");
    if (std::accumulate(accept_hist.begin(), accept_hist.end(), std::size_t{0}) != cycles)
        throw InternalError("stats: histogram does not sum to cycles");
}

// ----- decoding -----

namespace {

std::uint32_t pick(std::span<const float> logits, DecodeMode mode, double temperature, Rng* rng) {
    if (mode == DecodeMode::Greedy) return argmax_row(logits);
    if (!rng) throw InvalidArgument("stochastic decoding needs an Rng");
    return sample_index(tempered_softmax(logits, temperature), *rng);
}

void check_budget(const TargetModel& target, const DraftModel* draft, std::size_t prompt, std::size_t max_new,
                  std::size_t steps) {
    if (prompt == 0) throw InvalidArgument("decode: empty prompt");
    if (max_new == 0) throw InvalidArgument("decode: generation budget must be positive");
    const std::size_t need = prompt + max_new + steps;
    if (need > target.config().max_pos || (draft && need > draft->config().max_pos))
        throw InvalidArgument("decode: prompt + budget + steps exceeds max_pos");
}

}  // namespace

std::vector<std::uint32_t> vanilla_decode(const TargetModel& target, std::span<const std::uint32_t> prompt,
                                          std::size_t max_new, DecodeMode mode, double temperature, Rng* rng) {
    check_budget(target, nullptr, prompt.size(), max_new, 0);
    NoGradGuard ng;
    std::vector<std::uint32_t> seq(prompt.begin(), prompt.end());
    for (std::size_t i = 0; i < max_new; ++i) {
        const auto out = target.forward_causal(seq);
        seq.push_back(pick(row_of(out.logits, seq.size() - 1), mode, temperature, rng));
    }
    return {seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end()};
}

DecodeResult spec_decode(const TargetModel& target, const DraftModel& draft, std::span<const std::uint32_t> prompt,
                         std::size_t max_new, const SpecConfig& cfg, Rng* rng) {
    cfg.validate();
    check_budget(target, &draft, prompt.size(), max_new, cfg.steps);
    const bool greedy = cfg.mode == DecodeMode::Greedy;
    if (!greedy && !rng) throw InvalidArgument("stochastic decoding needs an Rng");
    NoGradGuard ng;

    std::vector<std::uint32_t> seq(prompt.begin(), prompt.end());
    const auto pre = target.forward_causal(seq);
    seq.push_back(pick(row_of(pre.logits, seq.size() - 1), cfg.mode, cfg.temperature, rng));
    Tensor features = pre.fused;

    DecodeResult res;
    res.stats.accept_hist.assign(cfg.steps + 1, 0);
    const std::size_t goal = prompt.size() + max_new;
    while (seq.size() < goal) {
        const std::size_t room = goal - seq.size() - 1;  // proposals that can still fit beside the bonus
        const std::size_t n = seq.size();
        DraftTree tree;
        std::vector<std::size_t> path;
        std::uint32_t next = 0;
        Tensor fused;
        if (greedy) {
            tree = draft_propose(draft, features, seq, cfg, room);
            auto v = verify_greedy(target, tree, seq);
            path = std::move(v.accepted);
            next = v.bonus;
            fused = v.fused;
        } else {
            std::vector<std::vector<double>> q;
            const auto chain = draft_sample_chain(draft, features, seq, std::min({cfg.steps, room, cfg.draft_tokens - 1}),
                                                  cfg.temperature, *rng, q);
            tree.nodes.push_back({seq.back(), -1, 0, 0.0});
            for (std::size_t i = 0; i < chain.size(); ++i)
                tree.nodes.push_back({chain[i], static_cast<std::int32_t>(i), static_cast<std::uint32_t>(i + 1), 0.0});
            const auto out = target_tree_forward(target, tree, seq);
            std::vector<std::vector<double>> p;
            for (std::size_t i = 0; i <= chain.size(); ++i)
                p.push_back(tempered_softmax(row_of(out.logits, n - 1 + i), cfg.temperature));
            const auto oc = verify_stochastic(p, q, chain, *rng);
            for (std::size_t i = 1; i <= oc.accepted; ++i) path.push_back(i);
            next = oc.token;
            fused = out.fused;
        }

        // Features for every token but the new tip: seq rows plus accepted nodes.
        const std::size_t F = fused.cols();
        std::vector<float> rows(fused.data().begin(), fused.data().begin() + static_cast<std::ptrdiff_t>(n * F));
        for (std::size_t node : path) {
            const auto r = row_of(fused, n - 1 + node);
            rows.insert(rows.end(), r.begin(), r.end());
            seq.push_back(tree.nodes[node].token);
        }
        seq.push_back(next);
        features = Tensor({rows.size() / F, F}, rows);

        ++res.stats.cycles;
        res.stats.proposed += tree.proposals();
        res.stats.accepted += path.size();
        res.stats.emitted += path.size() + 1;
        ++res.stats.accept_hist[path.size()];
    }
    res.stats.check();
    res.tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
    return res;
}

BenchmarkResult run_benchmark(const TargetModel& target, const DraftModel& draft,
                              const std::vector<std::vector<std::uint32_t>>& prompts, const SpecConfig& cfg,
                              std::size_t max_new, std::uint64_t seed, double cost_ratio) {
    cfg.validate();
    if (max_new == 0) throw InvalidArgument("benchmark: generation budget must be positive");
    if (prompts.empty()) throw InvalidArgument("benchmark: no prompts");
    BenchmarkResult r;
    r.config = cfg.label();
    r.prompts = prompts.size();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        Rng rng(seed * 0x9e3779b97f4a7c15ULL + i);
        auto d = spec_decode(target, draft, prompts[i], max_new, cfg, &rng);
        r.stats.merge(d.stats);
        r.outputs.push_back(std::move(d.tokens));
    }
    r.stats.check();
    if (r.stats.cycles > 0) {
        const double tau = std::clamp(r.stats.tau(), 1.0, static_cast<double>(cfg.steps + 1));
        r.alpha_hat = solve_alpha(tau, cfg.steps);
        r.modeled_speedup = speedup(r.alpha_hat, cfg.steps, cost_ratio);
    }
    return r;
}

std::string benchmark_csv_header() { return "config,prompts,cycles,proposed,accepted,tau,alpha_hat,modeled_speedup"; }

std::string benchmark_csv_row(const BenchmarkResult& r) {
    return fmt::format("\"{}\",{},{},{},{},{:.6f},{:.6f},{:.6f}", r.config, r.prompts, r.stats.cycles, r.stats.proposed,
                       r.stats.accepted, r.stats.tau(), r.alpha_hat, r.modeled_speedup);
}

}  // namespace speclab
