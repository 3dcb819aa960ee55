// Copyright 2026 The speclab Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "speclab/cli.hpp"

int main(int argc, char** argv) {
    return speclab::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
