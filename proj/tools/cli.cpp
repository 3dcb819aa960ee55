// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "speclab/cli.hpp"

#include <omp.h>
#include <openssl/evp.h>
#include <signal.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "speclab/analytics.hpp"
#include "speclab/blockmask.hpp"
#include "speclab/config.hpp"
#include "speclab/corpus.hpp"
#include "speclab/engine.hpp"
#include "speclab/model.hpp"
#include "speclab/specdec.hpp"
#include "speclab/trainer.hpp"

namespace speclab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string git_blob_sha1(std::span<const std::uint8_t> bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
        throw InternalError("sha1: digest failed");
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
    return hex;
}

std::string file_blob_sha1(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return git_blob_sha1(bytes);
}

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t threads = 0;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
    cmd->add_option("--config", c.config, "run configuration (JSON)");
    cmd->add_option("--seed", c.seed, "overrides the config seed");
    auto* o = cmd->add_option("--out", c.out, "output directory");
    if (out_required) o->required();
    cmd->add_option("--threads", c.threads, "OpenMP threads (0 = runtime default)");
}

void require_file(const std::string& flag, const std::string& path) {
    if (!fs::is_regular_file(path)) throw ConfigError(flag, "no such file '" + path + "'");
}

/// Collects what a command read and wrote, then writes manifest.json.
class Run {
public:
    Run(std::string command, const std::vector<std::string>& argv, const Common& common)
        : command_(std::move(command)), argv_(argv), common_(common) {
        if (!common_.config.empty()) {
            require_file("--config", common_.config);
            cfg_ = load_run_config(common_.config);
            input("config", common_.config);
        } else {
            cfg_ = parse_run_config(json::object());
        }
        if (common_.seed) {
            cfg_.seed = *common_.seed;
            cfg_.validate();
        }
        if (common_.threads > 0) omp_set_num_threads(static_cast<int>(common_.threads));
        if (!common_.out.empty()) fs::create_directories(common_.out);
    }

    const RunConfig& cfg() const { return cfg_; }
    bool has_out() const { return !common_.out.empty(); }
    std::string path(const std::string& name) const { return (fs::path(common_.out) / name).string(); }

    void input(const std::string& role, const std::string& file) {
        inputs_[role] = {{"path", file}, {"sha1", file_blob_sha1(file)}};
    }
    void output(const std::string& name) { outputs_.push_back(name); }
    json& results() { return results_; }

    void finish() {
        if (!has_out()) return;
        {
            std::ofstream cfg_out(path("config.json"));
            cfg_out << to_json(cfg_).dump(2) << '\n';
        }
        json outputs = json::object();
        for (const auto& name : outputs_) outputs[name] = file_blob_sha1(path(name));
        outputs["config.json"] = file_blob_sha1(path("config.json"));
        json m = {{"command", command_},
                  {"argv", argv_},
                  {"seed", cfg_.seed},
                  {"config", to_json(cfg_)},
                  {"inputs", inputs_},
                  {"outputs", outputs},
                  {"results", results_.is_null() ? json::object() : results_}};
        std::ofstream out(path("manifest.json"));
        out << m.dump(2) << '\n';
        if (!out) throw FormatError("cannot write '" + path("manifest.json") + "'");
    }

private:
    std::string command_;
    std::vector<std::string> argv_;
    Common common_;
    RunConfig cfg_;
    json inputs_ = json::object();
    std::vector<std::string> outputs_;
    json results_;
};

Corpus read_corpus(Run& run, const std::string& path) {
    require_file("--corpus", path);
    Corpus c = load_corpus(path);
    run.input("corpus", path);
    if (c.grammar.vocab != run.cfg().target.model.vocab)
        throw ConfigError("--corpus", fmt::format("corpus vocabulary {} differs from /target/vocab {}",
                                                  c.grammar.vocab, run.cfg().target.model.vocab));
    return c;
}

std::shared_ptr<TargetModel> read_target(Run& run, const std::string& path, const std::string& flag = "--target") {
    require_file(flag, path);
    auto t = std::make_shared<TargetModel>(TargetModel::from_tensors(load_tensors(path)));
    run.input("target", path);
    return t;
}

std::unique_ptr<EngineBackend> open_engine(Run& run, const std::string& target_path) {
    const auto& e = run.cfg().engine;
    if (e.backend == EngineBackendKind::Socket) {
        const auto [host, port] = parse_address(e.address);
        spdlog::info("engine: connecting to {}:{}", host, port);
        return std::make_unique<SocketEngine>(host, port);
    }
    if (target_path.empty()) throw ConfigError("--target", "required with the in_process engine backend");
    return std::make_unique<InProcessEngine>(read_target(run, target_path), e.max_tokens);
}

std::ofstream open_output(Run& run, const std::string& name) {
    std::ofstream f(run.path(name), std::ios::binary);
    if (!f) throw FormatError("cannot write '" + run.path(name) + "'");
    run.output(name);
    return f;
}

int cmd_gen_corpus(Run& run) {
    const auto& c = run.cfg();
    Corpus corpus = make_synthetic_corpus(c.corpus_seed(), c.corpus.samples, c.corpus.grammar);
    save_corpus(run.path("corpus.jsonl"), corpus);
    run.output("corpus.jsonl");
    run.results() = {{"samples", corpus.samples.size()}};
    spdlog::info("gen-corpus: {} samples -> {}", corpus.samples.size(), run.path("corpus.jsonl"));
    return kExitOk;
}

int cmd_pretrain(Run& run, const std::string& corpus_path) {
    const auto& c = run.cfg();
    Corpus corpus = read_corpus(run, corpus_path);
    Rng rng(c.target_init_seed());
    TargetModel model(c.target.model, rng);
    PretrainConfig p = c.target.pretrain;
    p.seed = c.pretrain_seed();
    const double before = perplexity(model, corpus);
    auto metrics = open_output(run, "pretrain.jsonl");
    pretrain_target(model, corpus, p, [&](std::size_t step, double loss) {
        metrics << json{{"step", step}, {"loss", loss}}.dump() << '\n';
        if (step % 50 == 0) spdlog::debug("pretrain step {} loss {:.4f}", step, loss);
    });
    metrics.close();
    const double after = perplexity(model, corpus);
    save_tensors(run.path("target.ckpt"), model.to_tensors());
    run.output("target.ckpt");
    run.results() = {{"perplexity_before", before}, {"perplexity_after", after}};
    spdlog::info("pretrain-target: perplexity {:.3f} -> {:.3f}", before, after);
    return kExitOk;
}

int cmd_regen(Run& run, const std::string& corpus_path, const std::string& target_path) {
    const auto& c = run.cfg();
    Corpus corpus = read_corpus(run, corpus_path);
    auto engine = open_engine(run, target_path);
    Corpus regen = regenerate_corpus(*engine, corpus, c.train.train.regen_temperature, c.train_seed());
    save_corpus(run.path("corpus.jsonl"), regen);
    run.output("corpus.jsonl");
    run.results() = {{"samples", regen.samples.size()}};
    spdlog::info("regen-data: {} samples -> {}", regen.samples.size(), run.path("corpus.jsonl"));
    return kExitOk;
}

int cmd_train_draft(Run& run, const std::string& corpus_path, const std::string& target_path) {
    const auto& c = run.cfg();
    Corpus corpus = read_corpus(run, corpus_path);
    if (c.train.samples > 0 && c.train.samples < corpus.samples.size()) corpus.samples.resize(c.train.samples);
    auto engine = open_engine(run, target_path);
    Rng rng(c.draft_init_seed());
    DraftModel draft(c.draft, build_vocab_map(corpus, c.target.model.vocab, c.draft.vocab), rng);
    TrainConfig t = c.train.train;
    t.seed = c.train_seed();
    auto metrics = open_output(run, "metrics.jsonl");
    const auto steps = train_draft(draft, *engine, corpus, t, &metrics);
    metrics.close();
    save_tensors(run.path("draft.ckpt"), draft.to_tensors());
    run.output("draft.ckpt");
    json last = json::object();
    if (!steps.empty())
        last = {{"step", steps.back().step},
                {"loss_per_ttt_step", steps.back().loss_per_ttt_step},
                {"top1_agreement", steps.back().top1_agreement}};
    run.results() = {{"optimizer_steps", steps.size()}, {"last", last}};
    spdlog::info("train-draft: {} optimizer steps -> {}", steps.size(), run.path("draft.ckpt"));
    return kExitOk;
}

int cmd_serve(Run& run, const std::string& checkpoint, const std::string& listen, std::optional<std::size_t> max_conc,
              std::ostream& out) {
    const auto& c = run.cfg();
    auto model = read_target(run, checkpoint, "--checkpoint");
    ServerOptions opts;
    std::uint16_t port = 0;
    try {
        std::tie(opts.host, port) = parse_address(listen.empty() ? c.engine.address : listen);
    } catch (const InvalidArgument& e) {
        throw ConfigError("--listen", e.what());
    }
    opts.port = port;
    opts.max_concurrent = max_conc.value_or(c.engine.max_concurrent);
    if (opts.max_concurrent == 0) throw ConfigError("--max-concurrent", "must be positive");

    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    EngineServer server(std::make_shared<InProcessEngine>(model, c.engine.max_tokens), opts);
    server.start();
    out << "listening on " << opts.host << ':' << server.port() << std::endl;
    spdlog::info("serve: {}:{} max_concurrent={}", opts.host, server.port(), opts.max_concurrent);
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
    spdlog::info("serve: stopped after {} requests", server.served_requests());
    run.results() = {{"served_requests", server.served_requests()}};
    return kExitOk;
}

int cmd_bench(Run& run, const std::string& target_path, const std::string& draft_path, std::ostream& out) {
    const auto& c = run.cfg();
    auto target = read_target(run, target_path);
    require_file("--draft", draft_path);
    DraftModel draft = DraftModel::from_tensors(load_tensors(draft_path));
    run.input("draft", draft_path);
    const auto prompts = make_prompts(c.prompt_seed(), c.specdec.prompts, c.corpus.grammar);
    std::string csv = benchmark_csv_header() + "\n";
    json rows = json::array();
    for (const auto& sc : c.specdec.configs) {
        const auto r = run_benchmark(*target, draft, prompts, sc, c.specdec.max_new, c.decode_seed(),
                                     c.specdec.cost_ratio);
        csv += benchmark_csv_row(r) + "\n";
        rows.push_back({{"config", r.config}, {"tau", r.stats.tau()}, {"alpha_hat", r.alpha_hat}});
        spdlog::info("bench {}: tau {:.3f} alpha_hat {:.3f}", r.config, r.stats.tau(), r.alpha_hat);
    }
    out << csv;
    if (run.has_out()) {
        auto f = open_output(run, "bench.csv");
        f << csv;
    }
    run.results() = {{"rows", rows}};
    return kExitOk;
}

std::size_t default_block(std::size_t q_len) {
    std::size_t b = q_len & (~q_len + 1);
    return std::min<std::size_t>(b == 0 ? 16 : b, 16);
}

int cmd_mask(Run& run, std::size_t q_len, std::size_t seq_len, std::size_t step, std::optional<std::size_t> block,
             std::ostream& out) {
    MaskParams p{q_len, seq_len, step, block.value_or(default_block(q_len))};
    try {
        p.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError("--qlen/--seqlen/--block", e.what());
    }
    const std::string grid = render_mask(build_blockmask(p)) + "\n";
    out << grid;
    if (run.has_out()) {
        auto f = open_output(run, "mask.txt");
        f << grid;
    }
    return kExitOk;
}

int cmd_sweep(Run& run, const std::vector<double>& alphas, const std::vector<std::size_t>& gammas,
              const std::vector<double>& costs, std::ostream& out) {
    std::string csv;
    try {
        csv = sweep_csv(sweep(alphas, gammas, costs));
    } catch (const InvalidArgument& e) {
        throw ConfigError("--alpha/--gamma/--cost", e.what());
    }
    out << csv;
    if (run.has_out()) {
        auto f = open_output(run, "sweep.csv");
        f << csv;
    }
    return kExitOk;
}

std::shared_ptr<spdlog::logger> make_logger() {
    auto sink = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
    auto logger = std::make_shared<spdlog::logger>("speclab", sink);
    logger->set_pattern("[%l] %v");
    return logger;
}

/// Applies SPECLAB_LOG. Returns false on an unknown level.
bool setup_logging(std::ostream& err) {
    static const std::map<std::string, spdlog::level::level_enum> levels = {
        {"error", spdlog::level::err}, {"warn", spdlog::level::warn},
        {"info", spdlog::level::info}, {"debug", spdlog::level::debug}};
    spdlog::level::level_enum level = spdlog::level::info;
    if (const char* env = std::getenv("SPECLAB_LOG"); env && *env) {
        auto it = levels.find(env);
        if (it == levels.end()) {
            err << "error: SPECLAB_LOG must be one of error, warn, info, debug (got '" << env << "')\n";
            return false;
        }
        level = it->second;
    }
    static auto logger = make_logger();
    spdlog::set_default_logger(logger);
    spdlog::set_level(level);
    return true;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    if (!setup_logging(err)) return kExitConfig;

    CLI::App app{"speclab: draft-model training and speculative decoding"};
    app.require_subcommand(1);

    Common common;
    std::string corpus, target, draft, checkpoint, listen;
    std::optional<std::size_t> max_concurrent, block;
    std::size_t q_len = 0, seq_len = 0, step = 0;
    std::vector<double> alphas, costs{0.05};
    std::vector<std::size_t> gammas;

    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    add_common(gen, common, true);

    auto* pre = app.add_subcommand("pretrain-target", "pretrain the target model");
    add_common(pre, common, true);
    pre->add_option("--corpus", corpus, "corpus JSON-lines")->required();

    auto* regen = app.add_subcommand("regen-data", "resample corpus responses from the target");
    add_common(regen, common, true);
    regen->add_option("--corpus", corpus, "corpus JSON-lines")->required();
    regen->add_option("--target", target, "target checkpoint (in_process backend)");

    auto* train = app.add_subcommand("train-draft", "train the draft head with training-time test");
    add_common(train, common, true);
    train->add_option("--corpus", corpus, "corpus JSON-lines")->required();
    train->add_option("--target", target, "target checkpoint (in_process backend)");

    auto* serve = app.add_subcommand("serve", "serve target features over TCP");
    add_common(serve, common, false);
    serve->add_option("--checkpoint", checkpoint, "target checkpoint")->required();
    serve->add_option("--listen", listen, "HOST:PORT");
    serve->add_option("--max-concurrent", max_concurrent, "connection limit");

    auto* bench = app.add_subcommand("bench", "speculative decoding benchmark (CSV)");
    add_common(bench, common, false);
    bench->add_option("--target", target, "target checkpoint")->required();
    bench->add_option("--draft", draft, "draft checkpoint")->required();

    auto* mask = app.add_subcommand("mask", "print the training-time-test attention mask");
    add_common(mask, common, false);
    mask->add_option("--qlen", q_len, "padded query length")->required();
    mask->add_option("--seqlen", seq_len, "real tokens")->required();
    mask->add_option("--step", step, "unroll step")->required();
    mask->add_option("--block", block, "block side (default: largest power of two <= 16 dividing qlen)");

    auto* sw = app.add_subcommand("sweep", "speedup model grid (CSV)");
    add_common(sw, common, false);
    sw->add_option("--alpha", alphas, "acceptance rates")->required();
    sw->add_option("--gamma", gammas, "speculative lengths")->required();
    sw->add_option("--cost", costs, "draft/target cost ratios");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }

    CLI::App* cmd = app.get_subcommands().front();
    try {
        Run r(cmd->get_name(), args, common);
        int rc = kExitOk;
        if (cmd == gen) rc = cmd_gen_corpus(r);
        else if (cmd == pre) rc = cmd_pretrain(r, corpus);
        else if (cmd == regen) rc = cmd_regen(r, corpus, target);
        else if (cmd == train) rc = cmd_train_draft(r, corpus, target);
        else if (cmd == serve) rc = cmd_serve(r, checkpoint, listen, max_concurrent, out);
        else if (cmd == bench) rc = cmd_bench(r, target, draft, out);
        else if (cmd == mask) rc = cmd_mask(r, q_len, seq_len, step, block, out);
        else if (cmd == sw) rc = cmd_sweep(r, alphas, gammas, costs, out);
        r.finish();
        return rc;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace speclab::cli
