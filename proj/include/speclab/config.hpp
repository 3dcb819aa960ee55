// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document with sections corpus, target, draft,
// train, specdec and engine. Every key is optional and falls back to the
// module default; unknown keys are rejected.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "speclab/corpus.hpp"
#include "speclab/error.hpp"
#include "speclab/model.hpp"
#include "speclab/specdec.hpp"
#include "speclab/trainer.hpp"

namespace speclab {

/// Bad configuration. `pointer` is the JSON pointer of the offending key.
class ConfigError : public Error {
public:
    ConfigError(std::string pointer, const std::string& what)
        : Error(pointer.empty() ? what : pointer + ": " + what), pointer_(std::move(pointer)) {}
    const std::string& pointer() const { return pointer_; }

private:
    std::string pointer_;
};

struct CorpusSection {
    std::size_t samples = 2000;
    GrammarParams grammar{};
};

struct TargetSection {
    TargetConfig model{};
    PretrainConfig pretrain{.epochs = 2};
};

struct TrainSection {
    TrainConfig train{};
    std::size_t samples = 0;  ///< leading corpus samples used; 0 = all
};

struct SpecdecSection {
    std::vector<SpecConfig> configs{SpecConfig{}};
    std::size_t prompts = 20;
    std::size_t max_new = 64;
    double cost_ratio = 0.05;
};

enum class EngineBackendKind : std::uint8_t { InProcess = 0, Socket = 1 };

struct EngineSection {
    EngineBackendKind backend = EngineBackendKind::InProcess;
    std::string address = "127.0.0.1:7070";
    std::size_t max_tokens = 4096;
    std::size_t max_concurrent = 4;
};

struct RunConfig {
    std::uint64_t seed = 1;
    CorpusSection corpus;
    TargetSection target;
    DraftConfig draft{};
    TrainSection train;
    SpecdecSection specdec;
    EngineSection engine;

    // Stage seeds derived from `seed`.
    std::uint64_t corpus_seed() const { return seed; }
    std::uint64_t pretrain_seed() const { return seed * 1000 + 1; }
    std::uint64_t target_init_seed() const { return seed * 1000 + 2; }
    std::uint64_t draft_init_seed() const { return seed * 1000 + 3; }
    std::uint64_t train_seed() const { return seed * 1000 + 4; }
    std::uint64_t prompt_seed() const { return seed * 1000 + 5; }
    std::uint64_t decode_seed() const { return seed * 1000 + 6; }

    /// Cross-section checks plus every module validate(). Throws ConfigError.
    void validate() const;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(const nlohmann::json& j);
/// Reads and parses a file; a missing or unparsable file is a ConfigError.
RunConfig load_run_config(const std::string& path);
/// Fully resolved form; parse_run_config(to_json(c)) reproduces c.
nlohmann::json to_json(const RunConfig& c);

}  // namespace speclab
