// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Commands: gen-corpus, pretrain-target, regen-data,
// train-draft, serve, bench, mask, sweep. Exit codes: 0 success, 1 runtime
// error, 2 usage or configuration error.

#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace speclab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Git object id of a blob: SHA-1 over "blob <size>\0" + bytes, lowercase hex.
std::string git_blob_sha1(std::span<const std::uint8_t> bytes);
std::string file_blob_sha1(const std::string& path);

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace speclab::cli
