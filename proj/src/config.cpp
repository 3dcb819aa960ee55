// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "speclab/engine.hpp"

namespace speclab {

using nlohmann::json;

namespace {

std::uint64_t as_unsigned(const json& v, const std::string& pointer) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
        if (v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
        throw ConfigError(pointer, "expected a non-negative integer");
    }
    throw ConfigError(pointer, "expected an integer");
}

/// Reads one JSON object, tracking consumed keys so leftovers can be
/// reported as unknown.
class Section {
public:
    Section(const json& j, std::string pointer) : j_(j), ptr_(std::move(pointer)) {
        if (!j_.is_object()) throw ConfigError(ptr_.empty() ? "/" : ptr_, "expected an object");
    }

    std::string at(const std::string& key) const { return ptr_ + "/" + key; }

    const json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void get(const std::string& key, std::uint64_t& out) {
        const json* v = find(key);
        if (v) out = as_unsigned(*v, at(key));
    }

    void get(const std::string& key, double& out) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_number()) throw ConfigError(at(key), "expected a number");
        out = v->get<double>();
    }

    void get(const std::string& key, bool& out) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_boolean()) throw ConfigError(at(key), "expected a boolean");
        out = v->get<bool>();
    }

    void get(const std::string& key, std::string& out) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_string()) throw ConfigError(at(key), "expected a string");
        out = v->get<std::string>();
    }

    void get(const std::string& key, std::vector<double>& out) {
        const json* v = find(key);
        if (!v) return;
        if (!v->is_array()) throw ConfigError(at(key), "expected an array of numbers");
        out.clear();
        for (std::size_t i = 0; i < v->size(); ++i) {
            if (!(*v)[i].is_number()) throw ConfigError(at(key) + "/" + std::to_string(i), "expected a number");
            out.push_back((*v)[i].get<double>());
        }
    }

    template <class Fn>
    void sub(const std::string& key, Fn&& fn) {
        const json* v = find(key);
        if (!v) return;
        Section s(*v, at(key));
        fn(s);
        s.done();
    }

    void done() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string ptr_;
    std::set<std::string> seen_;
};

void read_adamw(Section& s, AdamWConfig& a) {
    s.sub("adamw", [&](Section& o) {
        o.get("beta1", a.beta1);
        o.get("beta2", a.beta2);
        o.get("eps", a.eps);
        o.get("weight_decay", a.weight_decay);
    });
}

json adamw_json(const AdamWConfig& a) {
    return {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

template <class Fn>
void checked(const std::string& pointer, Fn&& fn) {
    try {
        fn();
    } catch (const InvalidArgument& e) {
        throw ConfigError(pointer, e.what());
    }
}

void require(bool ok, const std::string& pointer, const std::string& what) {
    if (!ok) throw ConfigError(pointer, what);
}

void check_adamw(const AdamWConfig& a, const std::string& p) {
    require(a.beta1 >= 0 && a.beta1 < 1, p + "/adamw/beta1", "must lie in [0, 1)");
    require(a.beta2 >= 0 && a.beta2 < 1, p + "/adamw/beta2", "must lie in [0, 1)");
    require(a.eps > 0, p + "/adamw/eps", "must be positive");
    require(a.weight_decay >= 0, p + "/adamw/weight_decay", "must be non-negative");
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    RunConfig c;
    Section root(j, "");
    root.get("seed", c.seed);

    root.sub("corpus", [&](Section& s) {
        auto& g = c.corpus.grammar;
        s.get("samples", c.corpus.samples);
        s.get("vocab", g.vocab);
        s.get("hot_tokens", g.hot_tokens);
        s.get("primary_prob", g.primary_prob);
        s.get("secondary_prob", g.secondary_prob);
        s.get("copy_prob", g.copy_prob);
        s.get("prompt_min", g.prompt_min);
        s.get("prompt_max", g.prompt_max);
        s.get("response_min", g.response_min);
        s.get("max_len", g.max_len);
        s.get("table_seed", g.table_seed);
    });

    root.sub("target", [&](Section& s) {
        auto& m = c.target.model;
        s.get("vocab", m.vocab);
        s.get("layers", m.layers);
        s.get("d", m.d);
        s.get("heads", m.heads);
        s.get("ffn_inter", m.ffn_inter);
        s.get("max_pos", m.max_pos);
        s.sub("pretrain", [&](Section& p) {
            auto& t = c.target.pretrain;
            p.get("epochs", t.epochs);
            p.get("batch_size", t.batch_size);
            p.get("lr", t.lr);
            p.get("warmup_frac", t.warmup_frac);
            p.get("q_len", t.q_len);
            p.get("block", t.block);
            read_adamw(p, t.adamw);
        });
    });

    root.sub("draft", [&](Section& s) {
        auto& d = c.draft;
        s.get("vocab", d.vocab);
        s.get("d", d.d);
        s.get("heads", d.heads);
        s.get("max_pos", d.max_pos);
        s.sub("ffn", [&](Section& f) {
            std::string variant = to_string(d.ffn.variant);
            f.get("variant", variant);
            checked(f.at("variant"), [&] { d.ffn.variant = parse_ffn_variant(variant); });
            f.get("inter", d.ffn.inter);
            f.get("experts", d.ffn.experts);
            f.get("top_r", d.ffn.top_r);
        });
    });

    root.sub("train", [&](Section& s) {
        auto& t = c.train.train;
        s.get("samples", c.train.samples);
        s.get("ttt_len", t.ttt_len);
        s.get("epochs", t.epochs);
        s.get("batch_size", t.batch_size);
        s.get("lr", t.lr);
        s.get("warmup_frac", t.warmup_frac);
        s.get("step_weights", t.step_weights);
        s.get("sampled_tokens", t.sampled_tokens);
        s.get("regenerate_data", t.regenerate_data);
        s.get("regen_temperature", t.regen_temperature);
        s.get("q_len", t.q_len);
        s.get("block", t.block);
        read_adamw(s, t.adamw);
    });

    root.sub("specdec", [&](Section& s) {
        auto& sp = c.specdec;
        std::string mode = to_string(sp.configs.front().mode);
        double temperature = sp.configs.front().temperature;
        s.get("mode", mode);
        s.get("temperature", temperature);
        DecodeMode m{};
        checked(s.at("mode"), [&] { m = parse_decode_mode(mode); });
        if (const json* v = s.find("configs")) {
            const std::string p = s.at("configs");
            require(v->is_array(), p, "expected an array of [steps, topk, draft_tokens] triples");
            sp.configs.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                const json& e = (*v)[i];
                const std::string ep = p + "/" + std::to_string(i);
                require(e.is_array() && e.size() == 3, ep, "expected [steps, topk, draft_tokens]");
                std::size_t vals[3];
                for (std::size_t k = 0; k < 3; ++k) vals[k] = as_unsigned(e[k], ep + "/" + std::to_string(k));
                sp.configs.push_back(SpecConfig{vals[0], vals[1], vals[2]});
            }
        }
        for (auto& cfg : sp.configs) {
            cfg.mode = m;
            cfg.temperature = temperature;
        }
        s.get("prompts", sp.prompts);
        s.get("max_new", sp.max_new);
        s.get("cost_ratio", sp.cost_ratio);
    });

    root.sub("engine", [&](Section& s) {
        auto& e = c.engine;
        std::string backend = e.backend == EngineBackendKind::Socket ? "socket" : "in_process";
        s.get("backend", backend);
        if (backend == "in_process") {
            e.backend = EngineBackendKind::InProcess;
        } else if (backend == "socket") {
            e.backend = EngineBackendKind::Socket;
        } else {
            throw ConfigError(s.at("backend"), "expected \"in_process\" or \"socket\"");
        }
        s.get("address", e.address);
        s.get("max_tokens", e.max_tokens);
        s.get("max_concurrent", e.max_concurrent);
    });

    root.done();
    c.draft.target_vocab = c.target.model.vocab;
    c.draft.ffn.d = c.draft.d;
    c.validate();
    return c;
}

void RunConfig::validate() const {
    const auto& g = corpus.grammar;
    require(corpus.samples > 0, "/corpus/samples", "must be positive");
    checked("/corpus", [&] { g.validate(); });

    checked("/target", [&] { target.model.validate(); });
    check_adamw(target.pretrain.adamw, "/target/pretrain");
    checked("/target/pretrain", [&] { target.pretrain.validate(); });
    require(target.model.vocab == g.vocab, "/target/vocab", "must equal /corpus/vocab");
    require(target.model.max_pos >= g.max_len, "/target/max_pos", "must be at least /corpus/max_len");
    require(target.pretrain.q_len >= g.max_len, "/target/pretrain/q_len", "must be at least /corpus/max_len");

    require(draft.vocab <= target.model.vocab, "/draft/vocab", "must not exceed /target/vocab");
    require(draft.target_vocab == target.model.vocab, "/draft", "token vocabulary must equal /target/vocab");
    checked("/draft", [&] { draft.validate(); });
    require(draft.max_pos >= g.max_len, "/draft/max_pos", "must be at least /corpus/max_len");

    check_adamw(train.train.adamw, "/train");
    checked("/train", [&] { train.train.validate(); });
    require(train.train.q_len >= g.max_len, "/train/q_len", "must be at least /corpus/max_len");
    require(train.samples <= corpus.samples, "/train/samples", "must not exceed /corpus/samples");

    require(!specdec.configs.empty(), "/specdec/configs", "must not be empty");
    for (std::size_t i = 0; i < specdec.configs.size(); ++i)
        checked("/specdec/configs/" + std::to_string(i), [&] { specdec.configs[i].validate(); });
    require(specdec.prompts > 0, "/specdec/prompts", "must be positive");
    require(specdec.max_new > 0, "/specdec/max_new", "must be positive");
    require(specdec.cost_ratio >= 0, "/specdec/cost_ratio", "must be non-negative");
    const std::size_t longest = g.prompt_max + 1 + specdec.max_new;
    require(longest <= target.model.max_pos && longest <= draft.max_pos, "/specdec/max_new",
            "prompt plus max_new exceeds the model position tables");

    require(engine.max_tokens > 0, "/engine/max_tokens", "must be positive");
    require(engine.max_concurrent > 0, "/engine/max_concurrent", "must be positive");
    checked("/engine/address", [&] { parse_address(engine.address); });
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("", "'" + path + "' is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

json to_json(const RunConfig& c) {
    const auto& g = c.corpus.grammar;
    const auto& m = c.target.model;
    const auto& p = c.target.pretrain;
    const auto& d = c.draft;
    const auto& t = c.train.train;
    const auto& sp = c.specdec;

    json configs = json::array();
    for (const auto& s : sp.configs) configs.push_back({s.steps, s.topk, s.draft_tokens});

    return {
        {"seed", c.seed},
        {"corpus",
         {{"samples", c.corpus.samples},
          {"vocab", g.vocab},
          {"hot_tokens", g.hot_tokens},
          {"primary_prob", g.primary_prob},
          {"secondary_prob", g.secondary_prob},
          {"copy_prob", g.copy_prob},
          {"prompt_min", g.prompt_min},
          {"prompt_max", g.prompt_max},
          {"response_min", g.response_min},
          {"max_len", g.max_len},
          {"table_seed", g.table_seed}}},
        {"target",
         {{"vocab", m.vocab},
          {"layers", m.layers},
          {"d", m.d},
          {"heads", m.heads},
          {"ffn_inter", m.ffn_inter},
          {"max_pos", m.max_pos},
          {"pretrain",
           {{"epochs", p.epochs},
            {"batch_size", p.batch_size},
            {"lr", p.lr},
            {"warmup_frac", p.warmup_frac},
            {"q_len", p.q_len},
            {"block", p.block},
            {"adamw", adamw_json(p.adamw)}}}}},
        {"draft",
         {{"vocab", d.vocab},
          {"d", d.d},
          {"heads", d.heads},
          {"max_pos", d.max_pos},
          {"ffn",
           {{"variant", to_string(d.ffn.variant)},
            {"inter", d.ffn.inter},
            {"experts", d.ffn.experts},
            {"top_r", d.ffn.top_r}}}}},
        {"train",
         {{"samples", c.train.samples},
          {"ttt_len", t.ttt_len},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"warmup_frac", t.warmup_frac},
          {"step_weights", t.step_weights},
          {"sampled_tokens", t.sampled_tokens},
          {"regenerate_data", t.regenerate_data},
          {"regen_temperature", t.regen_temperature},
          {"q_len", t.q_len},
          {"block", t.block},
          {"adamw", adamw_json(t.adamw)}}},
        {"specdec",
         {{"configs", configs},
          {"mode", to_string(sp.configs.front().mode)},
          {"temperature", sp.configs.front().temperature},
          {"prompts", sp.prompts},
          {"max_new", sp.max_new},
          {"cost_ratio", sp.cost_ratio}}},
        {"engine",
         {{"backend", c.engine.backend == EngineBackendKind::Socket ? "socket" : "in_process"},
          {"address", c.engine.address},
          {"max_tokens", c.engine.max_tokens},
          {"max_concurrent", c.engine.max_concurrent}}},
    };
}

}  // namespace speclab
