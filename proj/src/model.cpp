// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "speclab/error.hpp"

namespace speclab {

namespace {

Tensor param(Shape shape, Rng& rng, double stddev) {
    Tensor t = stddev > 0 ? Tensor::randn(std::move(shape), rng, static_cast<float>(stddev))
                          : Tensor(std::move(shape), AllocCategory::Parameter);
    t.set_requires_grad(true);
    return t;
}

Tensor ones(std::size_t n) {
    Tensor t = Tensor::full({n}, 1.0f, AllocCategory::Parameter);
    t.set_requires_grad(true);
    return t;
}

Tensor expert(const Tensor& x, const Tensor& up, const Tensor& down) {
    return matmul(silu(matmul(x, up)), down);
}

// Router gate weights: p restricted to each row's selection and divided by
// the selection's total. Unselected entries are 0.
Tensor selected_gates(const Tensor& probs, std::vector<std::vector<std::uint32_t>> sel) {
    const std::size_t n = probs.rows(), e = probs.cols();
    Tensor out({n, e});
    auto p = probs.data();
    auto o = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        double z = 0.0;
        for (auto i : sel[r]) z += p[r * e + i];
        for (auto i : sel[r]) o[r * e + i] = static_cast<float>(p[r * e + i] / z);
    }
    record(out, {probs}, [probs, sel = std::move(sel), e](Tensor& out) {
        auto g = out.grad();
        auto p = probs.data();
        auto gp = probs.grad_accumulator();
        for (std::size_t r = 0; r < sel.size(); ++r) {
            double z = 0.0, gp_dot = 0.0;
            for (auto i : sel[r]) z += p[r * e + i];
            for (auto i : sel[r]) gp_dot += double(g[r * e + i]) * p[r * e + i];
            for (auto i : sel[r])
                gp[r * e + i] += static_cast<float>(g[r * e + i] / z - gp_dot / (z * z));
        }
    });
    return out;
}

std::vector<std::vector<std::uint32_t>> top_r_selection(const Tensor& probs, std::size_t r_count) {
    const std::size_t n = probs.rows(), e = probs.cols();
    std::vector<std::vector<std::uint32_t>> sel(n);
    std::vector<std::uint32_t> order(e);
    auto p = probs.data();
    for (std::size_t r = 0; r < n; ++r) {
        std::iota(order.begin(), order.end(), 0u);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::uint32_t a, std::uint32_t b) { return p[r * e + a] > p[r * e + b]; });
        sel[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(r_count));
    }
    return sel;
}

void check_tokens(std::span<const std::uint32_t> tokens, std::span<const std::uint32_t> positions,
                  std::size_t vocab, std::size_t max_pos, const char* what) {
    if (tokens.empty()) throw InvalidArgument(std::string(what) + ": empty token sequence");
    if (positions.size() != tokens.size())
        throw DimensionError(std::string(what) + ": one position per token required");
    for (auto t : tokens)
        if (t >= vocab)
            throw IndexError(std::string(what) + ": token " + std::to_string(t) + " >= vocab " +
                             std::to_string(vocab));
    for (auto p : positions)
        if (p >= max_pos)
            throw IndexError(std::string(what) + ": position " + std::to_string(p) + " >= " +
                             std::to_string(max_pos));
}

AttnFn causal_dense(std::size_t n, std::size_t heads) {
    auto mask = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c <= r; ++c) (*mask)[r * n + c] = 1;
    return [mask, heads](std::size_t, const Tensor& q, const Tensor& k, const Tensor& v) {
        return dense_masked_attention(q, k, v, *mask, heads);
    };
}

Tensor attention_block(const Tensor& x, const Tensor& norm, const AttentionWeights& w,
                       std::size_t layer, const AttnFn& attn) {
    Tensor h = rms_norm(x, norm);
    Tensor a = attn(layer, matmul(h, w.wq), matmul(h, w.wk), matmul(h, w.wv));
    return add(x, matmul(a, w.wo));
}

AttentionWeights make_attention(std::size_t d, Rng& rng, double out_scale) {
    const double s = 1.0 / std::sqrt(double(d));
    return {param({d, d}, rng, s), param({d, d}, rng, s), param({d, d}, rng, s),
            param({d, d}, rng, s * out_scale)};
}

std::size_t numel_sum(const NamedTensors& ts) {
    std::size_t n = 0;
    for (const auto& [name, t] : ts) n += t.numel();
    return n;
}

// Copies values from a loaded container onto a freshly built model.
void assign(NamedTensors dst, const NamedTensors& src, const char* what) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : src) by_name[name] = &t;
    for (auto& [name, t] : dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError(std::string(what) + ": missing tensor '" + name + "'");
        if (it->second->shape() != t.shape())
            throw FormatError(std::string(what) + ": tensor '" + name + "' has shape " +
                              shape_str(it->second->shape()) + ", expected " + shape_str(t.shape()));
        auto out = t.data();
        std::copy(it->second->data().begin(), it->second->data().end(), out.begin());
    }
}

const Tensor& find(const NamedTensors& ts, const std::string& name, const char* what) {
    for (const auto& [n, t] : ts)
        if (n == name) return t;
    throw FormatError(std::string(what) + ": missing tensor '" + name + "'");
}

std::size_t meta_at(const Tensor& meta, std::size_t i) {
    if (i >= meta.numel()) throw FormatError("checkpoint: meta tensor too short");
    const float v = meta.data()[i];
    if (v < 0 || v != std::floor(v)) throw FormatError("checkpoint: meta entry is not a count");
    return static_cast<std::size_t>(v);
}

Tensor meta_tensor(std::initializer_list<std::size_t> values) {
    std::vector<float> f;
    for (auto v : values) f.push_back(static_cast<float>(v));
    return Tensor({f.size()}, std::span<const float>(f));
}

}  // namespace

// ----- FFN -----

const char* to_string(FfnVariant v) {
    switch (v) {
        case FfnVariant::Dense: return "dense";
        case FfnVariant::MoESameParams: return "moe_same_params";
        case FfnVariant::MoESameFlops: return "moe_same_flops";
        case FfnVariant::MoESharedExpert: return "moe_shared_expert";
    }
    return "?";
}

FfnVariant parse_ffn_variant(const std::string& s) {
    for (auto v : {FfnVariant::Dense, FfnVariant::MoESameParams, FfnVariant::MoESameFlops,
                   FfnVariant::MoESharedExpert})
        if (s == to_string(v)) return v;
    throw InvalidArgument("unknown ffn variant '" + s + "'");
}

void FfnConfig::validate() const {
    if (d == 0 || inter == 0) throw InvalidArgument("ffn: d and inter must be positive");
    if (variant == FfnVariant::Dense) return;
    if (experts < 2) throw InvalidArgument("ffn: MoE variants need at least 2 experts");
    if (top_r == 0 || top_r > experts) throw InvalidArgument("ffn: top_r must be in [1, experts]");
    if (variant == FfnVariant::MoESameParams && inter % experts != 0)
        throw InvalidArgument("ffn: inter " + std::to_string(inter) + " does not split across " +
                              std::to_string(experts) + " experts");
    if (variant != FfnVariant::MoESameParams && top_r != 1)
        throw InvalidArgument("ffn: same-flops variants route each token to one expert");
}

FfnLayout FfnLayout::from_config(const FfnConfig& c) {
    c.validate();
    FfnLayout l;
    l.d = c.d;
    switch (c.variant) {
        case FfnVariant::Dense: l.expert_inter = {c.inter}; break;
        case FfnVariant::MoESameParams:
            l.expert_inter.assign(c.experts, c.inter / c.experts);
            l.routed = true;
            l.top_r = c.top_r;
            break;
        case FfnVariant::MoESharedExpert: l.shared_inter = c.inter; [[fallthrough]];
        case FfnVariant::MoESameFlops:
            l.expert_inter.assign(c.experts, c.inter);
            l.routed = true;
            l.top_r = 1;
            break;
    }
    return l;
}

FeedForward::FeedForward(const FfnLayout& layout, Rng& rng, const std::string& prefix)
    : prefix_(prefix), layout_(layout) {
    if (layout.expert_inter.empty()) throw InvalidArgument("ffn: layout has no experts");
    if (layout.routed && (layout.top_r == 0 || layout.top_r > layout.expert_inter.size()))
        throw InvalidArgument("ffn: top_r out of range");
    const std::size_t d = layout.d;
    for (std::size_t inter : layout.expert_inter) {
        up.push_back(param({d, inter}, rng, 1.0 / std::sqrt(double(d))));
        down.push_back(param({inter, d}, rng, 1.0 / std::sqrt(double(inter))));
    }
    if (layout.shared_inter) {
        shared_up = param({d, layout.shared_inter}, rng, 1.0 / std::sqrt(double(d)));
        shared_down = param({layout.shared_inter, d}, rng, 1.0 / std::sqrt(double(layout.shared_inter)));
    }
    if (layout.routed) router = param({d, layout.expert_inter.size()}, rng, 1.0 / std::sqrt(double(d)));
}

Tensor FeedForward::forward(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != layout_.d)
        throw DimensionError("ffn: input " + shape_str(x.shape()) + " for width " + std::to_string(layout_.d));
    Tensor out;
    if (!layout_.routed) {
        out = expert(x, up[0], down[0]);
    } else {
        const std::size_t n = x.rows(), e = up.size();
        Tensor probs = softmax(matmul(x, router), 1);
        auto sel = top_r_selection(probs, layout_.top_r);
        std::vector<std::vector<std::uint32_t>> members(e);
        for (std::size_t r = 0; r < n; ++r)
            for (auto i : sel[r]) members[i].push_back(static_cast<std::uint32_t>(r));
        Tensor gates = selected_gates(probs, std::move(sel));
        for (std::size_t i = 0; i < e; ++i) {
            if (members[i].empty()) continue;
            Tensor xi = gather_rows(x, members[i]);
            Tensor gi = gather_rows(slice_cols(gates, i, i + 1), members[i]);
            Tensor yi = scatter_add_rows(scale_rows(expert(xi, up[i], down[i]), gi), members[i], n);
            out = out.defined() ? add(out, yi) : yi;
        }
    }
    if (layout_.shared_inter) out = add(out, expert(x, shared_up, shared_down));
    return out;
}

std::vector<std::uint32_t> FeedForward::route(const Tensor& x) const {
    if (!layout_.routed) return {};
    NoGradGuard ng;
    auto sel = top_r_selection(softmax(matmul(x, router), 1), 1);
    std::vector<std::uint32_t> out;
    for (auto& s : sel) out.push_back(s[0]);
    return out;
}

FfnCost FeedForward::cost() const {
    FfnCost c;
    const std::size_t d = layout_.d;
    for (std::size_t inter : layout_.expert_inter) c.params += 2 * d * inter;
    c.params += 2 * d * layout_.shared_inter;
    if (layout_.routed) {
        const std::size_t e = layout_.expert_inter.size();
        c.router_params = d * e;
        c.flops = layout_.top_r * 2 * d * *std::max_element(layout_.expert_inter.begin(), layout_.expert_inter.end());
        c.router_flops = d * e + layout_.top_r * d;
    } else {
        c.flops = 2 * d * layout_.expert_inter[0];
    }
    c.flops += 2 * d * layout_.shared_inter;
    return c;
}

void FeedForward::collect(NamedTensors& out) const {
    for (std::size_t i = 0; i < up.size(); ++i) {
        out.emplace_back(prefix_ + ".up." + std::to_string(i), up[i]);
        out.emplace_back(prefix_ + ".down." + std::to_string(i), down[i]);
    }
    if (shared_up.defined()) {
        out.emplace_back(prefix_ + ".shared_up", shared_up);
        out.emplace_back(prefix_ + ".shared_down", shared_down);
    }
    if (router.defined()) out.emplace_back(prefix_ + ".router", router);
}

void AttentionWeights::collect(NamedTensors& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".wo", wo);
}

// ----- target -----

void TargetConfig::validate() const {
    if (vocab < 2) throw InvalidArgument("target: vocab must be at least 2");
    if (layers < 3) throw InvalidArgument("target: at least 3 layers are needed for three taps");
    if (d == 0 || heads == 0 || d % heads) throw InvalidArgument("target: d must split across heads");
    if (ffn_inter == 0 || max_pos == 0) throw InvalidArgument("target: ffn_inter and max_pos must be positive");
}

TargetModel::TargetModel(const TargetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.d;
    const double out_scale = 1.0 / std::sqrt(2.0 * double(cfg.layers));
    tok_emb = param({cfg.vocab, d}, rng, 1.0);
    pos_emb = param({cfg.max_pos, d}, rng, 0.5);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        Layer layer;
        layer.attn_norm = ones(d);
        layer.ffn_norm = ones(d);
        layer.attn = make_attention(d, rng, out_scale);
        FfnLayout fl;
        fl.d = d;
        fl.expert_inter = {cfg.ffn_inter};
        layer.ffn = FeedForward(fl, rng, "layers." + std::to_string(l) + ".ffn");
        for (auto& w : layer.ffn.down) {
            NoGradGuard ng;
            for (auto& v : w.data()) v = static_cast<float>(v * out_scale);
        }
        layers.push_back(std::move(layer));
    }
    final_norm = ones(d);
    head = param({d, cfg.vocab}, rng, 0.0);
}

TargetOutput TargetModel::forward(std::span<const std::uint32_t> tokens,
                                  std::span<const std::uint32_t> positions, const AttnFn& attn) const {
    check_tokens(tokens, positions, cfg_.vocab, cfg_.max_pos, "target_forward");
    Tensor x = add(embedding_lookup(tok_emb, tokens), embedding_lookup(pos_emb, positions));
    const auto taps = cfg_.taps();
    std::vector<Tensor> tapped;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const Layer& layer = layers[l];
        x = attention_block(x, layer.attn_norm, layer.attn, l, attn);
        x = add(x, layer.ffn.forward(rms_norm(x, layer.ffn_norm)));
        if (std::find(taps.begin(), taps.end(), l) != taps.end()) tapped.push_back(x);
    }
    return {matmul(rms_norm(x, final_norm), head), concat_cols(tapped)};
}

TargetOutput TargetModel::forward_causal(std::span<const std::uint32_t> tokens) const {
    std::vector<std::uint32_t> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), 0u);
    return forward(tokens, pos, causal_dense(tokens.size(), cfg_.heads));
}

NamedTensors TargetModel::parameters() const {
    NamedTensors out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l);
        out.emplace_back(p + ".attn_norm", layers[l].attn_norm);
        out.emplace_back(p + ".ffn_norm", layers[l].ffn_norm);
        layers[l].attn.collect(out, p + ".attn");
        layers[l].ffn.collect(out);
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("head", head);
    return out;
}

std::size_t TargetModel::count_params() const { return numel_sum(parameters()); }

std::size_t TargetModel::count_flops() const {
    std::size_t f = 0;
    for (const auto& layer : layers) f += 4 * cfg_.d * cfg_.d + layer.ffn.cost().flops;
    return f + cfg_.d * cfg_.vocab;
}

NamedTensors TargetModel::to_tensors() const {
    NamedTensors out{{"meta", meta_tensor({cfg_.vocab, cfg_.layers, cfg_.d, cfg_.heads, cfg_.ffn_inter,
                                           cfg_.max_pos})}};
    for (auto& p : parameters()) out.push_back(p);
    return out;
}

TargetModel TargetModel::from_tensors(const NamedTensors& t) {
    const Tensor& meta = find(t, "meta", "target checkpoint");
    TargetConfig cfg;
    cfg.vocab = meta_at(meta, 0);
    cfg.layers = meta_at(meta, 1);
    cfg.d = meta_at(meta, 2);
    cfg.heads = meta_at(meta, 3);
    cfg.ffn_inter = meta_at(meta, 4);
    cfg.max_pos = meta_at(meta, 5);
    Rng rng(0);
    TargetModel m(cfg, rng);
    assign(m.parameters(), t, "target checkpoint");
    return m;
}

// ----- draft -----

void DraftConfig::validate() const {
    if (vocab < 2 || vocab > target_vocab) throw InvalidArgument("draft: need 2 <= vocab <= target_vocab");
    if (d == 0 || heads == 0 || d % heads) throw InvalidArgument("draft: d must split across heads");
    if (max_pos == 0) throw InvalidArgument("draft: max_pos must be positive");
    if (ffn.d != d) throw InvalidArgument("draft: ffn width differs from d");
    ffn.validate();
}

DraftModel::DraftModel(const DraftConfig& cfg, std::vector<std::uint32_t> draft_to_target, Rng& rng)
    : cfg_(cfg), d2t_(std::move(draft_to_target)) {
    cfg.validate();
    if (d2t_.size() != cfg.vocab)
        throw InvalidArgument("draft: vocabulary map has " + std::to_string(d2t_.size()) +
                              " entries for vocab " + std::to_string(cfg.vocab));
    std::vector<std::uint8_t> seen(cfg.target_vocab, 0);
    for (auto id : d2t_) {
        if (id >= cfg.target_vocab) throw IndexError("draft: vocabulary map entry out of range");
        if (seen[id]++) throw InvalidArgument("draft: vocabulary map is not injective");
    }
    const std::size_t d = cfg.d;
    tok_emb = param({cfg.target_vocab, d}, rng, 1.0);
    pos_emb = param({cfg.max_pos, d}, rng, 0.5);
    fc = param({3 * d, d}, rng, 1.0 / std::sqrt(3.0 * double(d)));
    w_in = param({2 * d, d}, rng, 1.0 / std::sqrt(2.0 * double(d)));
    emb_norm = ones(d);
    hidden_norm = ones(d);
    attn_norm = ones(d);
    ffn_norm = ones(d);
    final_norm = ones(d);
    attn = make_attention(d, rng, 1.0 / std::sqrt(2.0));
    ffn = FeedForward(FfnLayout::from_config(cfg.ffn), rng, "ffn");
    head = param({d, cfg.vocab}, rng, 0.02);
}

Tensor DraftModel::fuse(const Tensor& fused) const {
    if (fused.rank() != 2 || fused.cols() != 3 * cfg_.d)
        throw DimensionError("draft: fused features must be [n, 3d], got " + shape_str(fused.shape()));
    return matmul(fused, fc);
}

DraftStep DraftModel::step(const Tensor& hidden, std::span<const std::uint32_t> tokens,
                           std::span<const std::uint32_t> positions, const AttnFn& attn_fn) const {
    check_tokens(tokens, positions, cfg_.target_vocab, cfg_.max_pos, "draft_forward");
    if (hidden.rank() != 2 || hidden.cols() != cfg_.d || hidden.rows() != tokens.size())
        throw DimensionError("draft: hidden input " + shape_str(hidden.shape()) + " for " +
                             std::to_string(tokens.size()) + " tokens");
    Tensor e = rms_norm(embedding_lookup(tok_emb, tokens), emb_norm);
    Tensor h = rms_norm(hidden, hidden_norm);
    Tensor x = add(matmul(concat_cols({e, h}), w_in), embedding_lookup(pos_emb, positions));
    x = attention_block(x, attn_norm, attn, 0, attn_fn);
    x = add(x, ffn.forward(rms_norm(x, ffn_norm)));
    return {matmul(rms_norm(x, final_norm), head), x};
}

DraftStep DraftModel::ttt_forward(const Tensor& input, std::span<const std::uint32_t> tokens,
                                  std::span<const std::uint32_t> positions, TTTState& state,
                                  const BlockMask& mask) const {
    Tensor hidden = mask.params().step == 0 ? fuse(input) : input;
    const std::size_t heads = cfg_.heads;
    AttnFn fn = [&state, &mask, heads](std::size_t, const Tensor& q, const Tensor& k, const Tensor& v) {
        return ttt_attention_step(state, q, k, v, mask, heads);
    };
    return step(hidden, tokens, positions, fn);
}

NamedTensors DraftModel::parameters() const {
    NamedTensors out{{"tok_emb", tok_emb},         {"pos_emb", pos_emb},   {"fc", fc},
                     {"w_in", w_in},               {"emb_norm", emb_norm}, {"hidden_norm", hidden_norm},
                     {"attn_norm", attn_norm},     {"ffn_norm", ffn_norm}};
    attn.collect(out, "attn");
    ffn.collect(out);
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("head", head);
    return out;
}

std::size_t DraftModel::count_params() const { return numel_sum(parameters()); }

BlockCost DraftModel::block_cost() const {
    return {4 * cfg_.d * cfg_.d, 2 * cfg_.d, ffn.cost()};
}

std::size_t DraftModel::count_flops() const {
    const std::size_t d = cfg_.d;
    const auto c = ffn.cost();
    return 3 * d * d + 2 * d * d + 4 * d * d + c.flops + c.router_flops + d * cfg_.vocab;
}

NamedTensors DraftModel::to_tensors() const {
    std::vector<float> map(d2t_.begin(), d2t_.end());
    NamedTensors out{
        {"meta", meta_tensor({cfg_.vocab, cfg_.target_vocab, cfg_.d, cfg_.heads, cfg_.max_pos,
                              static_cast<std::size_t>(cfg_.ffn.variant), cfg_.ffn.inter, cfg_.ffn.experts,
                              cfg_.ffn.top_r})},
        {"vocab_map", Tensor({map.size()}, std::span<const float>(map))}};
    for (auto& p : parameters()) out.push_back(p);
    return out;
}

DraftModel DraftModel::from_tensors(const NamedTensors& t) {
    const Tensor& meta = find(t, "meta", "draft checkpoint");
    DraftConfig cfg;
    cfg.vocab = meta_at(meta, 0);
    cfg.target_vocab = meta_at(meta, 1);
    cfg.d = meta_at(meta, 2);
    cfg.heads = meta_at(meta, 3);
    cfg.max_pos = meta_at(meta, 4);
    const std::size_t variant = meta_at(meta, 5);
    if (variant > 3) throw FormatError("draft checkpoint: unknown ffn variant");
    cfg.ffn.variant = static_cast<FfnVariant>(variant);
    cfg.ffn.d = cfg.d;
    cfg.ffn.inter = meta_at(meta, 6);
    cfg.ffn.experts = meta_at(meta, 7);
    cfg.ffn.top_r = meta_at(meta, 8);
    const Tensor& map_t = find(t, "vocab_map", "draft checkpoint");
    std::vector<std::uint32_t> map;
    for (float v : map_t.data()) map.push_back(static_cast<std::uint32_t>(v));
    Rng rng(0);
    DraftModel m(cfg, std::move(map), rng);
    assign(m.parameters(), t, "draft checkpoint");
    return m;
}

// ----- checkpoint container -----

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(v & 0xff);
    b.push_back(v >> 8);
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}

struct Reader {
    std::span<const std::uint8_t> b;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (b.size() - pos < n) throw FormatError("checkpoint: truncated at byte " + std::to_string(pos));
    }
    std::uint8_t u8() {
        need(1);
        return b[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = b[pos] | (b[pos + 1] << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
};

}  // namespace

std::vector<std::uint8_t> encode_tensors(const NamedTensors& tensors) {
    std::vector<std::uint8_t> b{'S', 'P', 'F', 'G'};
    put_u32(b, kCheckpointVersion);
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw InvalidArgument("checkpoint: tensor name too long");
        if (t.rank() > 0xff) throw InvalidArgument("checkpoint: rank too large");
        put_u16(b, static_cast<std::uint16_t>(name.size()));
        b.insert(b.end(), name.begin(), name.end());
        b.push_back(static_cast<std::uint8_t>(t.rank()));
        for (auto e : t.shape()) {
            if (e > 0xffffffffu) throw InvalidArgument("checkpoint: extent too large");
            put_u32(b, static_cast<std::uint32_t>(e));
        }
        for (float v : t.data()) put_u32(b, std::bit_cast<std::uint32_t>(v));
    }
    return b;
}

NamedTensors decode_tensors(std::span<const std::uint8_t> bytes) {
    Reader r{bytes};
    r.need(4);
    if (std::memcmp(bytes.data(), "SPFG", 4) != 0) throw FormatError("checkpoint: bad magic");
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    NamedTensors out;
    while (r.pos < bytes.size()) {
        const std::uint16_t len = r.u16();
        r.need(len);
        std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
        r.pos += len;
        const std::uint8_t rank = r.u8();
        Shape shape;
        for (int i = 0; i < rank; ++i) shape.push_back(r.u32());
        const std::size_t n = shape_numel(shape);
        r.need(n * 4);
        Tensor t(shape, AllocCategory::Parameter);
        auto d = t.data();
        for (std::size_t i = 0; i < n; ++i) d[i] = std::bit_cast<float>(r.u32());
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

void save_tensors(const std::string& path, const NamedTensors& tensors) {
    const auto bytes = encode_tensors(tensors);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write to '" + path + "' failed");
}

NamedTensors load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_tensors(bytes);
}

}  // namespace speclab
