// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cgl {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int cli_main(int argc, char** argv);

}  // namespace cgl

#include "cgl/harness/cli_impl.hpp"
