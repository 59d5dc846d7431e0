// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cgl/core/rng.hpp"

namespace cgl {

struct MaskSpec {
  int grid_h = 0, grid_w = 0;
  std::vector<int> masked;  // sorted grid positions (row-major)
  double target_ratio = 0.0;
  double actual_ratio = 0.0;

  int tokens() const { return grid_h * grid_w; }
  std::vector<uint8_t> flags() const {
    std::vector<uint8_t> f(tokens(), 0);
    for (int i : masked) f[i] = 1;
    return f;
  }
};

// Union of random rectangles until coverage reaches the target. Block area
// is capped at max(1, N/8), so the overshoot stays within one block.
inline MaskSpec sample_block_mask(int h, int w, double ratio, Rng& rng) {
  if (ratio <= 0.0 || ratio > 1.0) throw std::runtime_error("block mask: ratio must be in (0,1]");
  MaskSpec spec;
  spec.grid_h = h;
  spec.grid_w = w;
  spec.target_ratio = ratio;
  const int n = h * w;
  const int target = std::max(1, static_cast<int>(std::ceil(ratio * n)));
  const int max_area = std::max(1, n / 8);
  std::vector<uint8_t> m(n, 0);
  int covered = 0;
  while (covered < target) {
    int bh, bw;
    do {
      bh = 1 + rng.randint(std::max(1, h / 2));
      bw = 1 + rng.randint(std::max(1, w / 2));
    } while (bh * bw > max_area);
    const int y0 = rng.randint(h - bh + 1);
    const int x0 = rng.randint(w - bw + 1);
    for (int y = y0; y < y0 + bh; ++y)
      for (int x = x0; x < x0 + bw; ++x)
        if (!m[y * w + x]) {
          m[y * w + x] = 1;
          ++covered;
        }
  }
  for (int i = 0; i < n; ++i)
    if (m[i]) spec.masked.push_back(i);
  spec.actual_ratio = static_cast<double>(covered) / n;
  return spec;
}

// MaskGIT-style training ratio: cos(pi/2 * u) with u ~ U[0,1), floored so at
// least one position is masked.
inline double draw_train_mask_ratio(Rng& rng, int tokens) {
  const double r = std::cos(M_PI_2 * rng.uniform());
  return std::max(1.0 / tokens, std::min(1.0, r));
}

// Number of tokens still masked after step s of S under the cosine schedule.
inline int cosine_masked_count(int tokens, int step, int total_steps) {
  if (step >= total_steps) return 0;
  const double frac = std::cos(M_PI_2 * static_cast<double>(step) / total_steps);
  return std::min(tokens - 1, static_cast<int>(std::floor(tokens * frac)));
}

}  // namespace cgl
