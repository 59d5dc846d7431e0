// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "cgl/core/optim.hpp"
#include "cgl/dataset/loader.hpp"
#include "cgl/tokenizer/tokenizer.hpp"

namespace cgl {

template <class S>
struct TokenizerTrainResult {
  std::string checkpoint_path;
  std::string curve_path;
  double final_loss = 0.0;
  double heldout_recon_mse = 0.0;
  double dead_code_fraction = 0.0;  // diagnostic, vqvae only
};

template <class S>
struct VaeLossParts {
  Var<S> total = nullptr, recon = nullptr, kl = nullptr;
};

// eps is the pre-drawn standard-normal noise for the posterior sample.
template <class S>
VaeLossParts<S> vae_loss_graph(Graph<S>& g, const Tokenizer<S>& tok, const Tensor<S>& batch,
                               const Tensor<S>& eps) {
  VaeLossParts<S> parts;
  auto eo = tok.encode_graph(g, batch, true, nullptr);
  Var<S> std_v = vexp(g, scale(g, eo.logvar, 0.5));
  Var<S> z = add(g, eo.mu, mul(g, std_v, g.constant(eps)));
  Var<S> recon = tok.decoder.fwd(g, tokens_to_chw_v(g, z, tok.grid()));
  parts.recon = mse_mean(g, recon, g.constant(batch));
  parts.kl = gaussian_kl(g, eo.mu, eo.logvar, batch.shape[0]);
  parts.total = add(g, parts.recon, scale(g, parts.kl, tok.cfg.kl_weight));
  return parts;
}

template <class S>
struct VqLossParts {
  Var<S> total = nullptr, recon = nullptr, codebook = nullptr, commit = nullptr;
  std::vector<int> codes;
};

// fixed_codes pins the code assignment (the within-step gradient treats the
// nearest-neighbor selection as constant); pass nullptr to recompute.
template <class S>
VqLossParts<S> vqvae_loss_graph(Graph<S>& g, const Tokenizer<S>& tok, const Tensor<S>& batch,
                                const std::vector<int>* fixed_codes = nullptr) {
  VqLossParts<S> parts;
  const TokenizerConfig& cfg = tok.cfg;
  auto eo = tok.encode_graph(g, batch, true, nullptr);
  const int B = batch.shape[0];
  const int N = cfg.tokens();
  if (fixed_codes) {
    parts.codes = *fixed_codes;
  } else {
    LatentGrid<S> lat;
    lat.h = B * tok.grid();
    lat.w = tok.grid();
    lat.d = cfg.d;
    lat.data = eo.tokens->value.reshaped({B * N, cfg.d});
    parts.codes = quantize(lat, tok.codebook->value).tokens.codes;
  }
  Var<S> flat = reshape(g, eo.tokens, {B * N, cfg.d});
  Var<S> e_sel = embedding(g, use(g, tok.codebook), parts.codes);
  parts.codebook = mse_mean(g, e_sel, detach(g, flat));
  parts.commit = mse_mean(g, flat, detach(g, e_sel));
  // straight-through: decoder sees codebook entries, encoder gets identity grads
  Tensor<S> jump(flat->value.shape);
  for (int64_t i = 0; i < jump.size(); ++i) jump[i] = e_sel->value[i] - flat->value[i];
  Var<S> z_q = add(g, flat, g.constant(jump));
  Var<S> recon =
      tok.decoder.fwd(g, tokens_to_chw_v(g, reshape(g, z_q, {B, N, cfg.d}), tok.grid()));
  parts.recon = mse_mean(g, recon, g.constant(batch));
  parts.total =
      add(g, parts.recon, add(g, parts.codebook, scale(g, parts.commit, cfg.beta)));
  return parts;
}

// VAE loss = recon + kl_weight * KL; VQ-VAE loss = recon + codebook + beta*commit.
// Aborts with the step number if the loss turns non-finite.
template <class S>
TokenizerTrainResult<S> train_tokenizer(const DatasetManifest& manifest, TokenizerConfig cfg,
                                        const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (manifest.records.empty()) throw std::runtime_error("train_tokenizer: empty manifest");
  cfg.validate();
  fs::create_directories(out_dir);

  Tensor<S> all = load_images<S>(manifest);
  const int total = all.shape[0];
  const int heldout = std::min(256, std::max(1, total / 20));
  const int train_n = std::max(1, total - heldout);

  Tokenizer<S> tok(cfg);
  Adam<S> opt(tok.params, cfg.lr);
  Rng root(cfg.seed);
  Rng data_rng = root.stream("tok/data");
  Rng eps_rng = root.stream("tok/eps");

  const std::string curve_path = (fs::path(out_dir) / "tokenizer_curve.csv").string();
  std::ofstream curve(curve_path);
  curve << "step,loss,recon,reg,commit\n";

  TokenizerTrainResult<S> out;
  const int B = std::min(cfg.batch, train_n);
  std::vector<int> usage(cfg.kind == TokenizerKind::kVqvae ? cfg.K : 0, 0);

  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx(B);
    for (int i = 0; i < B; ++i) idx[i] = data_rng.randint(train_n);
    Tensor<S> batch = slice_batch(all, idx);

    tok.params.zero_grad();
    Graph<S> g;
    double recon_v = 0, reg_v = 0, commit_v = 0;
    Var<S> loss = nullptr;

    if (cfg.kind == TokenizerKind::kVae) {
      Tensor<S> eps = randn<S>(Shape{B, cfg.tokens(), cfg.d}, eps_rng);
      auto parts = vae_loss_graph(g, tok, batch, eps);
      loss = parts.total;
      recon_v = parts.recon->value[0];
      reg_v = parts.kl->value[0];
    } else if (cfg.kind == TokenizerKind::kVqvae) {
      auto parts = vqvae_loss_graph(g, tok, batch);
      for (int c : parts.codes) ++usage[c];
      loss = parts.total;
      recon_v = parts.recon->value[0];
      reg_v = parts.codebook->value[0];
      commit_v = parts.commit->value[0];
    } else {
      throw std::runtime_error("train_tokenizer: pixel mode has no trainable parameters");
    }

    const double lv = loss->value[0];
    if (!std::isfinite(lv))
      throw std::runtime_error("train_tokenizer: loss diverged (non-finite) at step " +
                               std::to_string(step));
    g.backward(loss);
    opt.step();
    out.final_loss = lv;
    if (step % 25 == 0 || step == cfg.steps - 1)
      curve << step << "," << lv << "," << recon_v << "," << reg_v << "," << commit_v << "\n";
  }

  // held-out reconstruction MSE on the reserved tail
  {
    std::vector<int> idx;
    for (int i = train_n; i < total; ++i) idx.push_back(i);
    if (idx.empty()) idx.push_back(0);
    Tensor<S> hold = slice_batch(all, idx);
    Tensor<S> lat = tok.encode_latents_batch(hold);
    if (cfg.kind == TokenizerKind::kVqvae) {
      LatentGrid<S> lg;
      lg.h = static_cast<int>(idx.size()) * tok.grid();
      lg.w = tok.grid();
      lg.d = cfg.d;
      lg.data = lat.reshaped({static_cast<int>(idx.size()) * cfg.tokens(), cfg.d});
      auto q = quantize(lg, tok.codebook->value);
      lat = q.quantized.data.reshaped({static_cast<int>(idx.size()), cfg.tokens(), cfg.d});
    }
    Tensor<S> recon = tok.decode_batch(lat);
    double mse = 0;
    for (int64_t i = 0; i < recon.size(); ++i) {
      const double dd = recon[i] - hold[i];
      mse += dd * dd;
    }
    out.heldout_recon_mse = mse / recon.size();
  }

  if (cfg.kind == TokenizerKind::kVqvae) {
    std::ofstream hist((fs::path(out_dir) / "codebook_usage.csv").string());
    hist << "code,count\n";
    int dead = 0;
    for (int k = 0; k < cfg.K; ++k) {
      hist << k << "," << usage[k] << "\n";
      dead += usage[k] == 0;
    }
    out.dead_code_fraction = static_cast<double>(dead) / cfg.K;
  }

  out.checkpoint_path = (fs::path(out_dir) / "tokenizer.ckpt").string();
  out.curve_path = curve_path;
  tok.save(out.checkpoint_path);
  return out;
}

}  // namespace cgl
