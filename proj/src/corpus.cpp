// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/corpus.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

#include "speclab/error.hpp"

namespace speclab {

using nlohmann::json;

void GrammarParams::validate() const {
    if (vocab <= kFirstContentToken + 1) throw InvalidArgument("grammar: vocab too small");
    if (hot_tokens == 0 || hot_tokens > vocab - kFirstContentToken)
        throw InvalidArgument("grammar: hot_tokens must be in [1, vocab - 4]");
    if (primary_prob < 0 || secondary_prob < 0 || primary_prob + secondary_prob > 1.0)
        throw InvalidArgument("grammar: successor probabilities must be non-negative and sum to <= 1");
    if (copy_prob < 0 || copy_prob > 1) throw InvalidArgument("grammar: copy_prob must lie in [0, 1]");
    if (prompt_min < 2 || prompt_max < prompt_min) throw InvalidArgument("grammar: need 2 <= prompt_min <= prompt_max");
    if (response_min == 0 || prompt_max + 1 + response_min > max_len)
        throw InvalidArgument("grammar: max_len too small for prompt_max + 1 + response_min");
}

std::size_t Sample::prompt_len() const {
    std::size_t i = 0;
    while (i < loss_mask.size() && !loss_mask[i]) ++i;
    return i;
}

Grammar::Grammar(const GrammarParams& p) : params(p) {
    p.validate();
    Rng rng(p.table_seed);
    primary.resize(2 * p.vocab);
    secondary.resize(2 * p.vocab);
    auto hot = [&] { return static_cast<std::uint32_t>(kFirstContentToken + rng.below(p.hot_tokens)); };
    for (std::size_t i = 0; i < 2 * p.vocab; ++i) {
        primary[i] = hot();
        do {
            secondary[i] = hot();
        } while (p.hot_tokens > 1 && secondary[i] == primary[i]);
    }
}

std::uint32_t Grammar::next(std::uint32_t prev, std::uint32_t cur, Rng& rng) const {
    const std::size_t idx = (prev & 1u) * params.vocab + cur;
    const double u = rng.uniform();
    if (u < params.primary_prob) return primary[idx];
    if (u < params.primary_prob + params.secondary_prob) return secondary[idx];
    return static_cast<std::uint32_t>(kFirstContentToken + rng.below(params.vocab - kFirstContentToken));
}

std::vector<double> Grammar::law(std::uint32_t prev, std::uint32_t cur) const {
    if (cur >= params.vocab) throw IndexError("grammar: token out of range");
    std::vector<double> p(params.vocab, 0.0);
    const double rest = (1.0 - params.primary_prob - params.secondary_prob) /
                        static_cast<double>(params.vocab - kFirstContentToken);
    for (std::size_t t = kFirstContentToken; t < params.vocab; ++t) p[t] = rest;
    const std::size_t idx = (prev & 1u) * params.vocab + cur;
    p[primary[idx]] += params.primary_prob;
    p[secondary[idx]] += params.secondary_prob;
    return p;
}

namespace {

Sample draw_sample(const Grammar& g, Rng& rng) {
    const auto& p = g.params;
    const std::size_t plen = p.prompt_min + rng.below(p.prompt_max - p.prompt_min + 1);
    const std::size_t lo = plen + 1 + p.response_min;
    const std::size_t total = lo + rng.below(p.max_len - lo + 1);

    Sample s;
    s.tokens.reserve(total);
    s.tokens.push_back(static_cast<std::uint32_t>(kFirstContentToken + rng.below(p.hot_tokens)));
    s.tokens.push_back(g.next(s.tokens[0], s.tokens[0], rng));
    while (s.tokens.size() < plen) {
        const std::size_t n = s.tokens.size();
        s.tokens.push_back(g.next(s.tokens[n - 2], s.tokens[n - 1], rng));
    }
    const bool copy = rng.bernoulli(p.copy_prob);
    s.tokens.push_back(copy ? kCopyMarker : kGenMarker);

    // The chain skips over the marker.
    std::vector<std::uint32_t> chain(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(plen));
    if (copy)
        for (std::size_t i = 0; i < plen && s.tokens.size() < total; ++i) {
            s.tokens.push_back(s.tokens[i]);
            chain.push_back(s.tokens[i]);
        }
    while (s.tokens.size() < total) {
        const std::size_t n = chain.size();
        chain.push_back(g.next(chain[n - 2], chain[n - 1], rng));
        s.tokens.push_back(chain.back());
    }
    s.loss_mask.assign(total, 0);
    for (std::size_t i = plen + 1; i < total; ++i) s.loss_mask[i] = 1;
    return s;
}

}  // namespace

Corpus make_synthetic_corpus(std::uint64_t seed, std::size_t n_samples, const GrammarParams& params) {
    if (n_samples == 0) throw InvalidArgument("corpus: n_samples must be positive");
    Grammar g(params);
    Rng rng(seed);
    Corpus c{params, {}};
    c.samples.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) c.samples.push_back(draw_sample(g, rng));
    return c;
}

std::vector<std::vector<std::uint32_t>> make_prompts(std::uint64_t seed, std::size_t n, const GrammarParams& params) {
    const Corpus c = make_synthetic_corpus(seed, n, params);
    std::vector<std::vector<std::uint32_t>> out;
    for (const auto& s : c.samples)
        out.emplace_back(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(s.prompt_len()));
    return out;
}

namespace {

json grammar_json(const GrammarParams& g) {
    return {{"vocab", g.vocab},
            {"hot_tokens", g.hot_tokens},
            {"primary_prob", g.primary_prob},
            {"secondary_prob", g.secondary_prob},
            {"copy_prob", g.copy_prob},
            {"prompt_min", g.prompt_min},
            {"prompt_max", g.prompt_max},
            {"response_min", g.response_min},
            {"max_len", g.max_len},
            {"table_seed", g.table_seed}};
}

}  // namespace

void save_corpus(const std::string& path, const Corpus& c) {
    std::ofstream f(path);
    if (!f) throw Error("cannot open " + path + " for writing");
    f << json{{"grammar", grammar_json(c.grammar)}}.dump() << '\n';
    for (const auto& s : c.samples) f << json{{"tokens", s.tokens}, {"mask", s.loss_mask}}.dump() << '\n';
    if (!f) throw Error("write failed: " + path);
}

Corpus load_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open " + path);
    Corpus c;
    std::string line;
    std::size_t lineno = 0;
    try {
        if (!std::getline(f, line)) throw FormatError("empty corpus file");
        ++lineno;
        const json g = json::parse(line).at("grammar");
        auto& p = c.grammar;
        p.vocab = g.at("vocab");
        p.hot_tokens = g.at("hot_tokens");
        p.primary_prob = g.at("primary_prob");
        p.secondary_prob = g.at("secondary_prob");
        p.copy_prob = g.at("copy_prob");
        p.prompt_min = g.at("prompt_min");
        p.prompt_max = g.at("prompt_max");
        p.response_min = g.at("response_min");
        p.max_len = g.at("max_len");
        p.table_seed = g.at("table_seed");
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            const json j = json::parse(line);
            Sample s{j.at("tokens").get<std::vector<std::uint32_t>>(), j.at("mask").get<std::vector<std::uint8_t>>()};
            if (s.tokens.size() != s.loss_mask.size() || s.tokens.empty())
                throw FormatError("tokens/mask length mismatch");
            for (auto t : s.tokens)
                if (t >= p.vocab) throw FormatError("token out of vocabulary");
            c.samples.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (c.samples.empty()) throw FormatError(path + ": no samples");
    return c;
}

}  // namespace speclab
