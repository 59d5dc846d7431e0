// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>

namespace cgl {

inline int cli_main(int, char**) {
  std::printf("cgl: subcommands not wired yet\n");
  return 0;
}

}  // namespace cgl
