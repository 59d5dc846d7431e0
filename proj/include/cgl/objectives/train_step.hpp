// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "cgl/objectives/generator.hpp"

namespace cgl {

// one training batch after tokenization
template <class S>
struct GenBatch {
  int batch = 0;
  std::vector<int> codes;  // maskgit: [B*N]
  Tensor<S> latents;       // continuous families: [B,N,d]
  CondBatch cond;
};

inline std::vector<int> masked_row_indices(const MaskSpec& mask, int batch, int tokens) {
  std::vector<int> rows;
  rows.reserve(static_cast<size_t>(batch) * mask.masked.size());
  for (int b = 0; b < batch; ++b)
    for (int i : mask.masked) rows.push_back(b * tokens + i);
  return rows;
}

// categorical NLL on the masked positions (the mask is shared by the batch)
template <class S>
Var<S> maskgit_train_loss(Graph<S>& g, const Generator<S>& gen, const GenBatch<S>& batch,
                          const MaskSpec& mask, HiddenStates<S>* hs_out = nullptr,
                          const std::vector<int>& record_layers = {}) {
  if (mask.masked.empty()) throw std::runtime_error("maskgit loss: empty mask");
  const int N = gen.cfg.tokens();
  std::vector<uint8_t> flags(static_cast<size_t>(batch.batch) * N);
  for (int b = 0; b < batch.batch; ++b)
    for (int i : mask.masked) flags[b * N + i] = 1;
  ForwardOptions<S> opt;
  opt.record_layers = record_layers;
  Var<S> logits = gen.maskgit_logits(g, batch.codes, flags, batch.cond, opt, hs_out);
  const std::vector<int> rows = masked_row_indices(mask, batch.batch, N);
  std::vector<int> targets(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) targets[r] = batch.codes[rows[r]];
  return cross_entropy_mean(g, gather_rows(g, logits, rows), targets);
}

// GMM NLL on the masked positions
template <class S>
Var<S> givt_train_loss(Graph<S>& g, const Generator<S>& gen, const GenBatch<S>& batch,
                       const MaskSpec& mask) {
  if (mask.masked.empty()) throw std::runtime_error("givt loss: empty mask");
  const int N = gen.cfg.tokens();
  const int d = gen.cfg.latent_dim;
  std::vector<uint8_t> flags(static_cast<size_t>(batch.batch) * N);
  for (int b = 0; b < batch.batch; ++b)
    for (int i : mask.masked) flags[b * N + i] = 1;
  auto go = gen.givt_params(g, batch.latents, flags, batch.cond);
  const std::vector<int> rows = masked_row_indices(mask, batch.batch, N);
  Tensor<S> targets(Shape{static_cast<int>(rows.size()), d});
  for (size_t r = 0; r < rows.size(); ++r)
    for (int k = 0; k < d; ++k) targets[r * d + k] = batch.latents[rows[r] * d + k];
  Var<S> nll = gmm_nll_rows(g, gather_rows(g, go.wlogits, rows), gather_rows(g, go.mu, rows),
                            gather_rows(g, go.logvar, rows), targets, gen.cfg.var_floor);
  return mean_all(g, nll);
}

// epsilon-prediction MSE over every position; one timestep per sample
template <class S>
Var<S> dit_train_loss(Graph<S>& g, const Generator<S>& gen, const GenBatch<S>& batch,
                      const std::vector<int>& ts, const Tensor<S>& eps) {
  const int N = gen.cfg.tokens();
  const int d = gen.cfg.latent_dim;
  Tensor<S> noisy(batch.latents.shape);
  for (int b = 0; b < batch.batch; ++b) {
    const double a = std::sqrt(gen.sched.abar(ts[b]));
    const double s = std::sqrt(1.0 - gen.sched.abar(ts[b]));
    for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i) {
      const int64_t off = static_cast<int64_t>(b) * N * d + i;
      noisy[off] = static_cast<S>(a * batch.latents[off] + s * eps[off]);
    }
  }
  CondBatch cb = batch.cond;
  cb.t.assign(ts.begin(), ts.end());
  Var<S> eps_hat = gen.dit_eps(g, noisy, cb);
  return mse_mean(g, eps_hat, g.constant(eps.reshaped({batch.batch * N, d})));
}

// masked per-token diffusion: encoder/decoder conditions + tiny head MSE,
// one timestep and noise draw per masked token
template <class S>
Var<S> mar_train_loss(Graph<S>& g, const Generator<S>& gen, const GenBatch<S>& batch,
                      const MaskSpec& mask, const std::vector<int>& token_ts,
                      const Tensor<S>& token_eps) {
  if (mask.masked.empty()) throw std::runtime_error("mar loss: empty mask");
  const int N = gen.cfg.tokens();
  const int d = gen.cfg.latent_dim;
  Var<S> conds = gen.mar_conditions(g, batch.latents, mask, batch.cond);  // [B*N, w]
  const std::vector<int> rows = masked_row_indices(mask, batch.batch, N);
  const int M = static_cast<int>(rows.size());
  if (static_cast<int>(token_ts.size()) != M || token_eps.size() != static_cast<int64_t>(M) * d)
    throw std::runtime_error("mar loss: per-token noise size mismatch");
  Var<S> cond_rows = gather_rows(g, conds, rows);
  Tensor<S> noisy(Shape{M, d});
  std::vector<double> tvals(M);
  for (int r = 0; r < M; ++r) {
    const double a = std::sqrt(gen.sched.abar(token_ts[r]));
    const double s = std::sqrt(1.0 - gen.sched.abar(token_ts[r]));
    for (int k = 0; k < d; ++k)
      noisy[r * d + k] =
          static_cast<S>(a * batch.latents[rows[r] * d + k] + s * token_eps[r * d + k]);
    tvals[r] = token_ts[r];
  }
  Var<S> eps_hat = gen.mar_head_eps(g, cond_rows, noisy, tvals);
  return mse_mean(g, eps_hat, g.constant(token_eps));
}

}  // namespace cgl
