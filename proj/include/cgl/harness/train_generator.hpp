// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>

#include "cgl/core/optim.hpp"
#include "cgl/dataset/loader.hpp"
#include "cgl/objectives/sample.hpp"
#include "cgl/objectives/train_step.hpp"
#include "cgl/tokenizer/train.hpp"

namespace cgl {

// the training corpus after tokenization, held in memory
template <class S>
struct TokenizedData {
  int n = 0, tokens = 0, dim = 0;
  std::vector<int> codes;     // [n * tokens] (maskgit)
  Tensor<S> latents;          // [n, tokens, dim] (continuous families)
  std::vector<RealizedFactors> realized;
  double latent_scale = 1.0;
};

template <class S>
TokenizedData<S> tokenize_dataset(const DatasetManifest& manifest, const Tokenizer<S>& tok,
                                  bool need_codes, bool need_latents, int canvas) {
  if (manifest.records.empty()) throw std::runtime_error("tokenize_dataset: empty manifest");
  TokenizedData<S> out;
  out.n = static_cast<int>(manifest.records.size());
  out.tokens = tok.cfg.tokens();
  out.dim = tok.cfg.latent_dim();
  if (need_codes && tok.cfg.kind != TokenizerKind::kVqvae)
    throw std::runtime_error("tokenize_dataset: codes need a vqvae tokenizer");
  if (need_latents) out.latents = Tensor<S>(Shape{out.n, out.tokens, out.dim});
  if (need_codes) out.codes.resize(static_cast<size_t>(out.n) * out.tokens);

  const int chunk = 256;
  for (int base = 0; base < out.n; base += chunk) {
    const int count = std::min(chunk, out.n - base);
    Tensor<S> images(Shape{count, 3, tok.cfg.image_size, tok.cfg.image_size});
    const int64_t stride = 3LL * tok.cfg.image_size * tok.cfg.image_size;
    for (int i = 0; i < count; ++i) {
      ImageU8 img = read_png_rgb8(manifest.resolve(manifest.records[base + i]));
      Tensor<S> t = image_to_tensor<S>(img);
      std::copy(t.buf->begin(), t.buf->end(), images.buf->begin() + i * stride);
    }
    Tensor<S> lat = tok.encode_latents_batch(images);  // [count, N, d]
    if (need_latents)
      std::copy(lat.buf->begin(), lat.buf->end(),
                out.latents.buf->begin() + static_cast<int64_t>(base) * out.tokens * out.dim);
    if (need_codes) {
      LatentGrid<S> lg;
      lg.h = count * tok.grid();
      lg.w = tok.grid();
      lg.d = out.dim;
      lg.data = lat.reshaped({count * out.tokens, out.dim});
      auto q = quantize(lg, tok.codebook_values());
      std::copy(q.tokens.codes.begin(), q.tokens.codes.end(),
                out.codes.begin() + static_cast<int64_t>(base) * out.tokens);
    }
  }
  for (const auto& r : manifest.records)
    out.realized.push_back(realized_from_record(r, canvas));

  if (need_latents) {
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < out.latents.size(); ++i) mean += out.latents[i];
    mean /= out.latents.size();
    for (int64_t i = 0; i < out.latents.size(); ++i) {
      const double d = out.latents[i] - mean;
      var += d * d;
    }
    var /= out.latents.size();
    out.latent_scale = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    for (int64_t i = 0; i < out.latents.size(); ++i)
      out.latents[i] = static_cast<S>(out.latents[i] * out.latent_scale);
  }
  return out;
}

template <class S>
struct GenTrainResult {
  std::string checkpoint_path;
  std::string metrics_path;
  double final_loss = 0.0;
};

// Periodic evaluation hook: (step, model) -> {level0, level1, level2}.
template <class S>
using EvalHook = std::function<std::array<double, 3>(long, const Generator<S>&)>;

// Trains one generator of any family. When the JEPA auxiliary objective is
// enabled (maskgit only), runs the EMA target pass and predictor losses;
// with lambda = 0 the code path and RNG stream usage are identical to plain
// MaskGIT training.
template <class S>
GenTrainResult<S> train_generator(const DatasetManifest& manifest, const Tokenizer<S>& tok,
                                  GeneratorConfig cfg, const std::vector<CondFactorSpec>& specs,
                                  const std::string& out_dir, long eval_every = 0,
                                  EvalHook<S> eval_hook = nullptr) {
  namespace fs = std::filesystem;
  cfg.cond_factors = specs;
  cfg.grid = tok.grid();
  cfg.K = tok.cfg.kind == TokenizerKind::kVqvae ? tok.cfg.K : cfg.K;
  cfg.latent_dim = tok.cfg.latent_dim();
  cfg.validate();
  fs::create_directories(out_dir);

  const bool need_codes = cfg.family == Family::kMaskGit;
  const bool need_latents = cfg.family != Family::kMaskGit;
  TokenizedData<S> data =
      tokenize_dataset(manifest, tok, need_codes, need_latents, tok.cfg.image_size);
  cfg.latent_scale = need_latents ? data.latent_scale : 1.0;

  Generator<S> gen(cfg);
  Adam<S> opt(gen.params, cfg.lr);
  Rng root(cfg.seed);
  Rng data_rng = root.stream("gen/data");
  Rng mask_rng = root.stream("gen/mask");
  Rng regime_rng = root.stream("gen/regime");
  Rng diff_rng = root.stream("gen/diffusion");
  Rng jepa_rng = root.stream("gen/jepa");

  // EMA twin for JEPA targets; frozen so its forwards build no grad paths
  std::unique_ptr<Generator<S>> ema;
  if (cfg.jepa.enabled()) {
    ema = std::make_unique<Generator<S>>(cfg);
    ema->params.copy_values_from(gen.params);
    ema->params.set_frozen(true);
  }

  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  std::ofstream metrics(metrics_path);
  metrics << "step,loss,loss_mg,loss_jepa,acc_l0,acc_l1,acc_l2\n";

  const int B = std::min(cfg.batch, data.n);
  const int N = cfg.tokens();
  GenTrainResult<S> out;

  for (long step = 0; step < cfg.steps; ++step) {
    // assemble the batch
    GenBatch<S> batch;
    batch.batch = B;
    std::vector<int> idx(B);
    for (int i = 0; i < B; ++i) idx[i] = data_rng.randint(data.n);
    if (need_codes) {
      batch.codes.resize(static_cast<size_t>(B) * N);
      for (int i = 0; i < B; ++i)
        std::copy(data.codes.begin() + static_cast<int64_t>(idx[i]) * N,
                  data.codes.begin() + static_cast<int64_t>(idx[i] + 1) * N,
                  batch.codes.begin() + static_cast<int64_t>(i) * N);
    } else {
      batch.latents = slice_batch(data.latents, idx);
    }
    for (int i = 0; i < B; ++i)
      batch.cond.cond.push_back(apply_conditioning_regime(specs, data.realized[idx[i]],
                                                          cfg.regime, cfg.dropout_p, regime_rng));

    gen.params.zero_grad();
    Graph<S> g;
    Var<S> loss = nullptr;
    double mg_v = 0.0, jepa_v = 0.0;

    switch (cfg.family) {
      case Family::kMaskGit: {
        MaskSpec mask = sample_block_mask(cfg.grid, cfg.grid,
                                          draw_train_mask_ratio(mask_rng, N), mask_rng);
        if (!cfg.jepa.enabled()) {
          loss = maskgit_train_loss(g, gen, batch, mask);
          mg_v = loss->value[0];
        } else {
          HiddenStates<S> hs;
          Var<S> mg = maskgit_train_loss(g, gen, batch, mask, &hs, cfg.jepa.layers);
          mg_v = mg->value[0];
          // clean (unmasked) EMA pass in its own graph: stop-gradient targets
          Graph<S> eg;
          TokenInput<S> ein;
          ein.batch = B;
          ein.codes = batch.codes;
          ForwardOptions<S> eopt;
          eopt.record_layers = cfg.jepa.layers;
          auto ehs = ema->bb->forward(eg, ein, batch.cond, eopt);
          ContextTargetMask ct =
              split_context_target(cfg.grid, cfg.grid, cfg.jepa.target_ratio, jepa_rng);
          std::vector<Var<S>> layer_losses;
          for (int l : cfg.jepa.layers) {
            Var<S> ll = gen.predictors->layer_loss(g, l, hs.at_layer(l),
                                                   ehs.at_layer(l)->value, ct,
                                                   gen.bb->cfg.token_offset());
            layer_losses.push_back(ll);
            jepa_v += ll->value[0];
          }
          loss = jepa_total_loss(g, mg, layer_losses, cfg.jepa.lambda);
        }
        break;
      }
      case Family::kGivt: {
        MaskSpec mask = sample_block_mask(cfg.grid, cfg.grid,
                                          draw_train_mask_ratio(mask_rng, N), mask_rng);
        loss = givt_train_loss(g, gen, batch, mask);
        mg_v = loss->value[0];
        break;
      }
      case Family::kDit: {
        std::vector<int> ts(B);
        for (int b = 0; b < B; ++b) ts[b] = 1 + diff_rng.randint(gen.sched.T);
        Tensor<S> eps = randn<S>({B, N, cfg.latent_dim}, diff_rng);
        loss = dit_train_loss(g, gen, batch, ts, eps);
        mg_v = loss->value[0];
        break;
      }
      case Family::kMar: {
        MaskSpec mask = sample_block_mask(cfg.grid, cfg.grid,
                                          draw_train_mask_ratio(mask_rng, N), mask_rng);
        const int M = static_cast<int>(mask.masked.size()) * B;
        std::vector<int> ts(M);
        for (int r = 0; r < M; ++r) ts[r] = 1 + diff_rng.randint(gen.sched.T);
        Tensor<S> eps = randn<S>({M, cfg.latent_dim}, diff_rng);
        loss = mar_train_loss(g, gen, batch, mask, ts, eps);
        mg_v = loss->value[0];
        break;
      }
    }

    const double lv = loss->value[0];
    if (!std::isfinite(lv))
      throw std::runtime_error("train_generator: loss diverged at step " + std::to_string(step));
    g.backward(loss);
    opt.step();
    if (ema) ema_update(gen.params, ema->params, cfg.jepa.ema_decay);
    out.final_loss = lv;

    const bool do_eval = eval_every > 0 && eval_hook &&
                         (step == cfg.steps - 1 || (step + 1) % eval_every == 0);
    if (step % 25 == 0 || step == cfg.steps - 1 || do_eval) {
      metrics << step << "," << lv << "," << mg_v << "," << jepa_v;
      if (do_eval) {
        auto acc = eval_hook(step, gen);
        metrics << "," << acc[0] << "," << acc[1] << "," << acc[2];
      } else {
        metrics << ",,,";
      }
      metrics << "\n";
      metrics.flush();
    }
  }

  out.metrics_path = metrics_path;
  out.checkpoint_path = (fs::path(out_dir) / "generator.ckpt").string();
  gen.save(out.checkpoint_path);
  return out;
}

}  // namespace cgl
