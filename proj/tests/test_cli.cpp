// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "speclab/blockmask.hpp"
#include "speclab/cli.hpp"
#include "speclab/config.hpp"
#include "speclab/rng.hpp"

using namespace speclab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kSource = SPECLAB_SOURCE_DIR;

struct Invocation {
    int rc;
    std::string out, err;
};

Invocation invoke(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int rc = cli::run(args, out, err);
    return {rc, out.str(), err.str()};
}

class TempDir {
public:
    explicit TempDir(const std::string& name)
        : path_(fs::temp_directory_path() / ("speclab_" + name + "_" + std::to_string(::getpid()))) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }

private:
    fs::path path_;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string config_error_pointer(const json& j) {
    try {
        parse_run_config(j);
    } catch (const ConfigError& e) {
        return e.pointer();
    }
    return "<accepted>";
}

std::vector<std::string> split_lines(const std::string& s) {
    std::vector<std::string> lines;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    return lines;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    bool quoted = false;
    for (char ch : s) {
        if (ch == '"') quoted = !quoted;
        if (ch == sep && !quoted) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    return parts;
}

/// A small but complete config used by the pipeline tests.
json mini_config() {
    return json::parse(R"({
      "seed": 3,
      "corpus": {"samples": 80, "vocab": 48, "hot_tokens": 20, "prompt_min": 4, "prompt_max": 8,
                 "response_min": 6, "max_len": 30},
      "target": {"vocab": 48, "layers": 3, "d": 16, "heads": 2, "ffn_inter": 32, "max_pos": 64,
                 "pretrain": {"epochs": 1, "q_len": 32, "block": 8}},
      "draft": {"vocab": 24, "d": 16, "heads": 2, "max_pos": 64, "ffn": {"inter": 32}},
      "train": {"ttt_len": 3, "epochs": 1, "q_len": 32, "block": 8},
      "specdec": {"configs": [[3, 1, 4], [5, 3, 6]], "prompts": 4, "max_new": 16}
    })");
}

}  // namespace

// ----- hashing -----

TEST(GitBlobSha1, KnownObjectIds) {
    EXPECT_EQ(cli::git_blob_sha1({}), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    const std::string hello = "hello\n";
    EXPECT_EQ(cli::git_blob_sha1({reinterpret_cast<const std::uint8_t*>(hello.data()), hello.size()}),
              "ce013625030ba8dba906f756967f9e9ca394464a");
}

// ----- config parsing -----

TEST(RunConfigParse, EmptyDocumentGivesModuleDefaults) {
    const RunConfig c = parse_run_config(json::object());
    EXPECT_EQ(c.corpus.grammar.vocab, GrammarParams{}.vocab);
    EXPECT_EQ(c.target.model.layers, TargetConfig{}.layers);
    EXPECT_EQ(c.train.train.ttt_len, TrainConfig{}.ttt_len);
    EXPECT_EQ(c.train.train.lr, TrainConfig{}.lr);
    ASSERT_EQ(c.specdec.configs.size(), 1u);
    EXPECT_EQ(c.specdec.configs[0].label(), "(3,1,4)");
    EXPECT_EQ(c.draft.target_vocab, c.target.model.vocab);
    EXPECT_EQ(c.engine.backend, EngineBackendKind::InProcess);
}

TEST(RunConfigParse, UnknownKeysReportTheirPointer) {
    EXPECT_EQ(config_error_pointer({{"bogus", 1}}), "/bogus");
    EXPECT_EQ(config_error_pointer({{"corpus", {{"vocabulary", 3}}}}), "/corpus/vocabulary");
    EXPECT_EQ(config_error_pointer({{"target", {{"pretrain", {{"lrr", 1}}}}}}), "/target/pretrain/lrr");
    EXPECT_EQ(config_error_pointer({{"train", {{"adamw", {{"beta3", 0.9}}}}}}), "/train/adamw/beta3");
    EXPECT_EQ(config_error_pointer({{"draft", {{"ffn", {{"kind", "dense"}}}}}}), "/draft/ffn/kind");
}

TEST(RunConfigParse, TypeErrorsReportTheirPointer) {
    EXPECT_EQ(config_error_pointer({{"train", {{"epochs", "2"}}}}), "/train/epochs");
    EXPECT_EQ(config_error_pointer({{"train", {{"epochs", -1}}}}), "/train/epochs");
    EXPECT_EQ(config_error_pointer({{"train", {{"epochs", 1.5}}}}), "/train/epochs");
    EXPECT_EQ(config_error_pointer({{"train", {{"sampled_tokens", 1}}}}), "/train/sampled_tokens");
    EXPECT_EQ(config_error_pointer({{"train", {{"step_weights", {1, "x"}}}}}), "/train/step_weights/1");
    EXPECT_EQ(config_error_pointer({{"corpus", 5}}), "/corpus");
    EXPECT_EQ(config_error_pointer(json::array()), "/");
    EXPECT_EQ(config_error_pointer(json::parse(R"({"specdec": {"configs": [[3, 1]]}})")), "/specdec/configs/0");
    EXPECT_EQ(config_error_pointer(json::parse(R"({"specdec": {"configs": [[3, 1, -4]]}})")), "/specdec/configs/0/2");
    EXPECT_EQ(config_error_pointer({{"specdec", {{"mode", "beam"}}}}), "/specdec/mode");
    EXPECT_EQ(config_error_pointer({{"draft", {{"ffn", {{"variant", "sparse"}}}}}}), "/draft/ffn/variant");
    EXPECT_EQ(config_error_pointer({{"engine", {{"backend", "grpc"}}}}), "/engine/backend");
}

TEST(RunConfigParse, SemanticErrorsReportTheirPointer) {
    EXPECT_EQ(config_error_pointer({{"target", {{"vocab", 128}}}}), "/target/vocab");
    EXPECT_EQ(config_error_pointer({{"draft", {{"vocab", 512}}}}), "/draft/vocab");
    EXPECT_EQ(config_error_pointer(json::parse(R"({"specdec": {"configs": [[3, 1, 0]]}})")), "/specdec/configs/0");
    EXPECT_EQ(config_error_pointer(
                  json::parse(R"({"specdec": {"mode": "stochastic", "configs": [[3, 1, 4], [3, 2, 4]]}})")),
              "/specdec/configs/1");
    EXPECT_EQ(config_error_pointer({{"specdec", {{"configs", json::array()}}}}), "/specdec/configs");
    EXPECT_EQ(config_error_pointer({{"specdec", {{"max_new", 500}}}}), "/specdec/max_new");
    EXPECT_EQ(config_error_pointer({{"train", {{"ttt_len", 0}}}}), "/train");
    EXPECT_EQ(config_error_pointer({{"train", {{"samples", 5000}}}}), "/train/samples");
    EXPECT_EQ(config_error_pointer({{"corpus", {{"samples", 0}}}}), "/corpus/samples");
    EXPECT_EQ(config_error_pointer({{"target", {{"pretrain", {{"adamw", {{"beta2", 1.0}}}}}}}}),
              "/target/pretrain/adamw/beta2");
    EXPECT_EQ(config_error_pointer({{"engine", {{"address", "nowhere"}}}}), "/engine/address");
}

namespace {

/// Random valid configuration built from independent field choices.
json random_config(Rng& rng) {
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.below(n)); };
    json j = json::object();
    j["seed"] = rng.next_u64() >> 1;
    const std::size_t ttt = 1 + pick(7);
    json train = {{"ttt_len", ttt}, {"epochs", 1 + pick(3)}, {"lr", 1e-4 + rng.uniform() * 1e-2}};
    if (pick(2)) {
        json w = json::array();
        for (std::size_t i = 0; i < ttt; ++i) w.push_back(0.25 + rng.uniform());
        train["step_weights"] = w;
    }
    if (pick(2)) train["sampled_tokens"] = true;
    if (pick(2)) train["adamw"] = {{"beta1", 0.5 + 0.4 * rng.uniform()}, {"weight_decay", rng.uniform() * 0.1}};
    j["train"] = train;
    if (pick(2)) j["corpus"] = {{"samples", 1 + pick(5000)}, {"copy_prob", rng.uniform() * 0.5}};
    if (pick(2)) j["target"] = {{"layers", 3 + pick(4)}, {"pretrain", {{"epochs", 1 + pick(4)}}}};
    if (pick(2)) {
        const char* variants[] = {"dense", "moe_same_params", "moe_same_flops", "moe_shared_expert"};
        j["draft"] = {{"vocab", 16 + pick(200)}, {"ffn", {{"variant", variants[pick(4)]}}}};
    }
    json configs = json::array();
    for (std::size_t i = 0, n = 1 + pick(4); i < n; ++i) {
        const std::size_t steps = 1 + pick(7), topk = 1 + pick(4);
        configs.push_back(json::array({steps, topk, 2 + pick(11)}));
    }
    j["specdec"] = {{"configs", configs}, {"prompts", 1 + pick(50)}, {"max_new", 1 + pick(64)}};
    if (pick(2)) j["engine"] = {{"backend", pick(2) ? "socket" : "in_process"}, {"max_concurrent", 1 + pick(8)}};
    return j;
}

/// Every object-valued location in `j`, as JSON pointers.
void object_pointers(const json& j, const std::string& at, std::vector<std::string>& out) {
    if (!j.is_object()) return;
    out.push_back(at);
    for (auto it = j.begin(); it != j.end(); ++it) object_pointers(*it, at + "/" + it.key(), out);
}

}  // namespace

TEST(RunConfigProperty, ResolvedFormRoundTrips) {
    Rng rng(101);
    for (int i = 0; i < 200; ++i) {
        const json j = random_config(rng);
        const RunConfig c = parse_run_config(j);
        const json resolved = to_json(c);
        const json again = to_json(parse_run_config(resolved));
        ASSERT_EQ(resolved, again) << j.dump();
        // Every supplied scalar survives resolution.
        const json flat = j.flatten(), rflat = resolved.flatten();
        for (auto it = flat.begin(); it != flat.end(); ++it) {
            if (it.key().rfind("/specdec/configs", 0) == 0) continue;
            ASSERT_TRUE(rflat.contains(it.key())) << it.key();
            if (it->is_number_float())
                ASSERT_DOUBLE_EQ(rflat[it.key()].get<double>(), it->get<double>()) << it.key();
            else
                ASSERT_EQ(rflat[it.key()], *it) << it.key();
        }
    }
}

TEST(RunConfigProperty, InjectedUnknownKeyIsReportedExactly) {
    Rng rng(202);
    for (int i = 0; i < 200; ++i) {
        json j = to_json(parse_run_config(random_config(rng)));
        std::vector<std::string> objects;
        object_pointers(j, "", objects);
        const std::string at = objects[rng.below(objects.size())];
        const std::string key = "zz_unknown_" + std::to_string(i);
        j[json::json_pointer(at)][key] = 1;
        ASSERT_EQ(config_error_pointer(j), at + "/" + key);
    }
}

// ----- command line -----

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(invoke({}).rc, cli::kExitConfig);
    EXPECT_EQ(invoke({"frobnicate"}).rc, cli::kExitConfig);
    EXPECT_EQ(invoke({"mask", "--qlen", "4"}).rc, cli::kExitConfig);
    EXPECT_EQ(invoke({"mask", "--qlen", "4", "--seqlen", "5", "--step", "1"}).rc, cli::kExitConfig);
    EXPECT_EQ(invoke({"mask", "--qlen", "12", "--seqlen", "5", "--step", "1", "--block", "5"}).rc, cli::kExitConfig);
    EXPECT_EQ(invoke({"sweep", "--alpha", "1.5", "--gamma", "4"}).rc, cli::kExitConfig);
    EXPECT_EQ(invoke({"--help"}).rc, cli::kExitOk);
}

TEST(Cli, ConfigErrorsExitTwoWithPointer) {
    TempDir tmp("cfgerr");
    write_file(tmp / "bad.json", R"({"train": {"ttt_len": 3, "bogus": true}})");
    auto r = invoke({"gen-corpus", "--config", tmp / "bad.json", "--out", tmp / "o"});
    EXPECT_EQ(r.rc, cli::kExitConfig);
    EXPECT_NE(r.err.find("/train/bogus"), std::string::npos) << r.err;

    write_file(tmp / "broken.json", "{\"train\": ");
    EXPECT_EQ(invoke({"gen-corpus", "--config", tmp / "broken.json", "--out", tmp / "o"}).rc, cli::kExitConfig);
    EXPECT_EQ(invoke({"gen-corpus", "--config", tmp / "missing.json", "--out", tmp / "o"}).rc, cli::kExitConfig);

    r = invoke({"pretrain-target", "--corpus", tmp / "missing.jsonl", "--out", tmp / "o"});
    EXPECT_EQ(r.rc, cli::kExitConfig);
    EXPECT_NE(r.err.find("--corpus"), std::string::npos);
}

TEST(Cli, RuntimeErrorsExitOne) {
    TempDir tmp("runtime");
    write_file(tmp / "junk.ckpt", "not a checkpoint");
    const std::string tiny = kSource + "/checkpoints/tiny";
    auto r = invoke({"bench", "--config", tiny + "/config.json", "--target", tmp / "junk.ckpt", "--draft",
                     tiny + "/draft.ckpt"});
    EXPECT_EQ(r.rc, cli::kExitRuntime) << r.err;
    write_file(tmp / "corpus.jsonl", "{\"grammar\": 3}\n");
    EXPECT_EQ(invoke({"pretrain-target", "--corpus", tmp / "corpus.jsonl", "--out", tmp / "o"}).rc, cli::kExitRuntime);
}

TEST(Cli, InvalidLogLevelExitsTwo) {
    const char* old = std::getenv("SPECLAB_LOG");
    const std::string saved = old ? old : "";
    ::setenv("SPECLAB_LOG", "chatty", 1);
    const int rc = invoke({"sweep", "--alpha", "0.5", "--gamma", "2"}).rc;
    if (old)
        ::setenv("SPECLAB_LOG", saved.c_str(), 1);
    else
        ::unsetenv("SPECLAB_LOG");
    EXPECT_EQ(rc, cli::kExitConfig);
}

TEST(Cli, MaskExampleGrid) {
    const auto r = invoke({"mask", "--qlen", "4", "--seqlen", "3", "--step", "1"});
    ASSERT_EQ(r.rc, 0) << r.err;
    EXPECT_EQ(r.out,
              "█···│█···\n"
              "██··│·█··\n"
              "███·│··█·\n"
              "███·│····\n");
}

TEST(Cli, MaskMatchesExpandDense) {
    Rng rng(9);
    for (int i = 0; i < 40; ++i) {
        const std::size_t block = std::size_t{1} << rng.below(3);
        const std::size_t q_len = block * (1 + rng.below(4));
        const std::size_t seq_len = 1 + rng.below(q_len);
        const std::size_t step = rng.below(4);
        const auto r = invoke({"mask", "--qlen", std::to_string(q_len), "--seqlen", std::to_string(seq_len), "--step",
                               std::to_string(step), "--block", std::to_string(block)});
        ASSERT_EQ(r.rc, 0) << r.err;
        const Tensor dense = expand_dense(build_blockmask({q_len, seq_len, step, block}));
        const auto lines = split_lines(r.out);
        ASSERT_EQ(lines.size(), q_len);
        const std::string on = "█", off = "·", bar = "│";
        for (std::size_t q = 0; q < q_len; ++q) {
            std::size_t pos = 0;
            for (std::size_t k = 0; k < (step + 1) * q_len; ++k) {
                if (k && k % q_len == 0) {
                    ASSERT_EQ(lines[q].compare(pos, bar.size(), bar), 0);
                    pos += bar.size();
                }
                const bool allowed = dense.at(q, k) != 0.0f;
                const std::string& glyph = allowed ? on : off;
                ASSERT_EQ(lines[q].compare(pos, glyph.size(), glyph), 0) << "q=" << q << " k=" << k;
                pos += glyph.size();
            }
            ASSERT_EQ(pos, lines[q].size());
        }
    }
}

TEST(Cli, SweepExampleRow) {
    const auto r = invoke({"sweep", "--alpha", "0.8", "--gamma", "4", "--cost", "0.05"});
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto lines = split_lines(r.out);
    ASSERT_EQ(lines.size(), 2u);
    EXPECT_EQ(lines[0], "alpha,gamma,c,expected_tokens,speedup,optimal_gamma_flag");
    const auto cols = split(lines[1], ',');
    ASSERT_EQ(cols.size(), 6u);
    EXPECT_NEAR(std::stod(cols[3]), 3.3616, 1e-4);
    EXPECT_NEAR(std::stod(cols[4]), 2.8013, 1e-4);
}

TEST(Cli, BenchOnShippedTinyCheckpoints) {
    const std::string tiny = kSource + "/checkpoints/tiny";
    TempDir tmp("bench");
    const auto r = invoke({"bench", "--config", tiny + "/config.json", "--target", tiny + "/target.ckpt", "--draft",
                           tiny + "/draft.ckpt", "--out", tmp / "b"});
    ASSERT_EQ(r.rc, 0) << r.err;
    const auto lines = split_lines(r.out);
    ASSERT_EQ(lines.size(), 6u);
    EXPECT_EQ(lines[0], "config,prompts,cycles,proposed,accepted,tau,alpha_hat,modeled_speedup");
    EXPECT_EQ(split(lines[1], ',')[0], "\"(3,1,4)\"");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto c = split(lines[i], ',');
        ASSERT_EQ(c.size(), 8u);
        const double cycles = std::stod(c[2]), proposed = std::stod(c[3]), accepted = std::stod(c[4]);
        const double tau = std::stod(c[5]);
        EXPECT_GE(tau, 1.0);
        EXPECT_LE(accepted, proposed);
        EXPECT_NEAR(tau, (accepted + cycles) / cycles, 1e-6);
    }
    EXPECT_EQ(slurp(tmp / "b/bench.csv"), r.out);
    EXPECT_TRUE(fs::exists(tmp / "b/manifest.json"));
}

namespace {

struct PipelineOutputs {
    std::string pretrain_metrics, draft_metrics, bench_csv, target_ckpt, draft_ckpt;
};

PipelineOutputs run_pipeline(const std::string& dir, const std::string& config) {
    auto ok = [](const Invocation& r) {
        if (r.rc != 0) ADD_FAILURE() << r.err;
    };
    ok(invoke({"gen-corpus", "--config", config, "--out", dir + "/corpus"}));
    ok(invoke({"pretrain-target", "--config", config, "--corpus", dir + "/corpus/corpus.jsonl", "--out",
               dir + "/target"}));
    ok(invoke({"train-draft", "--config", config, "--corpus", dir + "/corpus/corpus.jsonl", "--target",
               dir + "/target/target.ckpt", "--out", dir + "/draft"}));
    ok(invoke({"bench", "--config", config, "--target", dir + "/target/target.ckpt", "--draft",
               dir + "/draft/draft.ckpt", "--out", dir + "/bench"}));
    return {slurp(dir + "/target/pretrain.jsonl"), slurp(dir + "/draft/metrics.jsonl"), slurp(dir + "/bench/bench.csv"),
            slurp(dir + "/target/target.ckpt"), slurp(dir + "/draft/draft.ckpt")};
}

}  // namespace

TEST(Cli, PipelineIsByteDeterministic) {
    TempDir tmp("pipeline");
    write_file(tmp / "mini.json", mini_config().dump());
    const auto a = run_pipeline(tmp / "a", tmp / "mini.json");
    const auto b = run_pipeline(tmp / "b", tmp / "mini.json");
    ASSERT_FALSE(a.draft_metrics.empty());
    EXPECT_EQ(a.pretrain_metrics, b.pretrain_metrics);
    EXPECT_EQ(a.draft_metrics, b.draft_metrics);
    EXPECT_EQ(a.bench_csv, b.bench_csv);
    EXPECT_EQ(a.target_ckpt, b.target_ckpt);
    EXPECT_EQ(a.draft_ckpt, b.draft_ckpt);

    // Draft metrics are one JSON object per optimizer step.
    for (const auto& line : split_lines(a.draft_metrics)) {
        const json m = json::parse(line);
        ASSERT_TRUE(m.contains("step") && m.contains("lr"));
        ASSERT_EQ(m["loss_per_ttt_step"].size(), 3u);
        ASSERT_EQ(m["top1_agreement"].size(), 3u);
    }
}

TEST(Cli, ManifestRecordsHashesAndReruns) {
    TempDir tmp("manifest");
    write_file(tmp / "mini.json", mini_config().dump());
    ASSERT_EQ(invoke({"gen-corpus", "--config", tmp / "mini.json", "--out", tmp / "a"}).rc, 0);
    const json m = json::parse(slurp(tmp / "a/manifest.json"));
    EXPECT_EQ(m["command"], "gen-corpus");
    EXPECT_EQ(m["seed"], 3);
    EXPECT_EQ(m["inputs"]["config"]["sha1"], cli::file_blob_sha1(tmp / "mini.json"));
    EXPECT_EQ(m["outputs"]["corpus.jsonl"], cli::file_blob_sha1(tmp / "a/corpus.jsonl"));
    EXPECT_EQ(m["config"], to_json(parse_run_config(mini_config())));

    // The resolved config written beside the outputs reproduces them.
    ASSERT_EQ(invoke({"gen-corpus", "--config", tmp / "a/config.json", "--out", tmp / "b"}).rc, 0);
    EXPECT_EQ(slurp(tmp / "a/corpus.jsonl"), slurp(tmp / "b/corpus.jsonl"));
    EXPECT_EQ(slurp(tmp / "a/config.json"), slurp(tmp / "b/config.json"));
}

TEST(Cli, SeedFlagOverridesConfig) {
    TempDir tmp("seed");
    write_file(tmp / "mini.json", mini_config().dump());
    ASSERT_EQ(invoke({"gen-corpus", "--config", tmp / "mini.json", "--out", tmp / "a"}).rc, 0);
    ASSERT_EQ(invoke({"gen-corpus", "--config", tmp / "mini.json", "--seed", "11", "--out", tmp / "b"}).rc, 0);
    EXPECT_NE(slurp(tmp / "a/corpus.jsonl"), slurp(tmp / "b/corpus.jsonl"));
    EXPECT_EQ(json::parse(slurp(tmp / "b/manifest.json"))["seed"], 11);
    EXPECT_EQ(json::parse(slurp(tmp / "b/config.json"))["seed"], 11);
}
