// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
//
// cgl: command-line entry point. Subcommands are registered in
// harness/cli.hpp; this file only owns the process boundary.

#include <cstdio>
#include <exception>

#include "cgl/harness/cli.hpp"

int main(int argc, char** argv) {
  try {
    return cgl::cli_main(argc, argv);
  } catch (const cgl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
