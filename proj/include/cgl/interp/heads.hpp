// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cgl/eval/report.hpp"

namespace cgl {

// Model-ready inputs for one image (codes for maskgit, latents otherwise).
template <class S>
struct AnalysisInput {
  std::vector<int> codes;
  Tensor<S> latents;  // [N, d], already latent-scaled
  ConditionVector cond;
};

// pairs of inputs differing in exactly one factor; all other realized
// values match exactly
template <class S>
struct ContrastPairSet {
  int factor = 0;
  std::vector<std::pair<AnalysisInput<S>, AnalysisInput<S>>> pairs;
};

template <class S>
AnalysisInput<S> analysis_input_from_image(const Generator<S>& gen, const Tokenizer<S>& tok,
                                           const ImageU8& img, const ConditionVector& cond) {
  AnalysisInput<S> out;
  out.cond = cond;
  Tensor<S> t = image_to_tensor<S>(img);
  Tensor<S> batch = t.reshaped({1, 3, tok.cfg.image_size, tok.cfg.image_size});
  if (gen.cfg.family == Family::kMaskGit) {
    out.codes = tok.encode_codes_batch(batch)[0].codes;
  } else {
    Tensor<S> lat = tok.encode_latents_batch(batch);
    out.latents = lat.reshaped({gen.cfg.tokens(), gen.cfg.latent_dim});
    if (gen.cfg.latent_scale != 1.0)
      for (int64_t i = 0; i < out.latents.size(); ++i)
        out.latents[i] = static_cast<S>(out.latents[i] * gen.cfg.latent_scale);
  }
  return out;
}

// Renders contrast pairs for one factor: a random base tuple, the varied
// factor switched between two labels, every other realized value shared.
template <class S>
ContrastPairSet<S> make_contrast_pairs(const Generator<S>& gen, const Tokenizer<S>& tok,
                                       const SpaceFile& sf, int factor, int n_pairs, Rng& rng) {
  const auto specs = cond_specs_from(sf);
  const bool quantized = regime_is_quantized(gen.cfg.regime);
  ContrastPairSet<S> out;
  out.factor = factor;
  const Factor& f = sf.space.factors[factor];
  for (int p = 0; p < n_pairs; ++p) {
    FactorTuple ta(sf.space.num_factors());
    for (int i = 0; i < sf.space.num_factors(); ++i)
      ta[i] = rng.randint(sf.space.factors[i].cardinality());
    FactorTuple tb = ta;
    ta[factor] = rng.randint(f.cardinality());
    do {
      tb[factor] = rng.randint(f.cardinality());
    } while (tb[factor] == ta[factor]);

    std::string shape_a, shape_b;
    Realized ra = draw_realization(sf.space, ta, sf.render, rng, &shape_a);
    Realized rb = ra;  // share every non-varied realization (and position)
    {
      // redraw only the varied factor's continuous value inside its band
      const Factor& vf = sf.space.factors[factor];
      auto hit = sf.render.hue_bands.find(vf.name);
      auto sit = sf.render.size_bands.find(vf.name);
      if (hit != sf.render.hue_bands.end()) {
        const Band& b = hit->second[tb[factor]];
        double h = rng.uniform(b.lo, b.hi);
        rb.hue = h - std::floor(h);
      } else if (sit != sf.render.size_bands.end()) {
        const Band& b = sit->second[tb[factor]];
        rb.size_px = rng.uniform(b.lo, b.hi) * sf.render.canvas;
      }
      shape_b = shape_a;
      if (vf.name == "shape") shape_b = vf.values[tb[factor]];
    }
    ImageU8 img_a = render_from_realized(shape_a, ra, sf.render);
    ImageU8 img_b = render_from_realized(shape_b, rb, sf.render);

    Rng cond_rng(0);  // no dropout at analysis time; rng unused
    RealizedFactors rfa{ta, ra.hue, ra.size_px / sf.render.canvas};
    RealizedFactors rfb{tb, rb.hue, rb.size_px / sf.render.canvas};
    ConditionVector ca = apply_conditioning_regime(
        specs, rfa, quantized ? CondRegime::kQuantized : CondRegime::kFull, 0.0, cond_rng);
    ConditionVector cb = apply_conditioning_regime(
        specs, rfb, quantized ? CondRegime::kQuantized : CondRegime::kFull, 0.0, cond_rng);
    out.pairs.push_back({analysis_input_from_image(gen, tok, img_a, ca),
                         analysis_input_from_image(gen, tok, img_b, cb)});
  }
  return out;
}

// clean forward (no masking) -> L2-normalized global-token embeddings [B, w]
template <class S>
Tensor<S> global_embeddings(const Generator<S>& gen, const std::vector<AnalysisInput<S>>& inputs,
                            const InterventionSpec<S>* iv = nullptr) {
  if (!gen.cfg.global_token)
    throw std::runtime_error("interp: global token disabled in this model");
  const int B = static_cast<int>(inputs.size());
  const int N = gen.cfg.tokens();
  CondBatch cb;
  for (const auto& in : inputs) cb.cond.push_back(in.cond);
  ForwardOptions<S> opt;
  opt.interventions = iv;
  Graph<S> g;
  HiddenStates<S> hs;
  if (gen.cfg.family == Family::kMaskGit) {
    TokenInput<S> tin;
    tin.batch = B;
    for (const auto& in : inputs) tin.codes.insert(tin.codes.end(), in.codes.begin(), in.codes.end());
    hs = gen.bb->forward(g, tin, cb, opt);
  } else if (gen.cfg.family == Family::kDit) {
    // minimal-noise timestep: pass sqrt(abar_1)-scaled latents at t = 1
    TokenInput<S> tin;
    tin.batch = B;
    tin.latents = Tensor<S>(Shape{B, N, gen.cfg.latent_dim});
    const double a = std::sqrt(gen.sched.abar(1));
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < static_cast<int64_t>(N) * gen.cfg.latent_dim; ++i)
        tin.latents[b * N * gen.cfg.latent_dim + i] =
            static_cast<S>(a * inputs[b].latents[i]);
    cb.t.assign(B, 1.0);
    hs = gen.bb->forward(g, tin, cb, opt);
  } else if (gen.cfg.family == Family::kGivt) {
    TokenInput<S> tin;
    tin.batch = B;
    tin.latents = Tensor<S>(Shape{B, N, gen.cfg.latent_dim});
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < static_cast<int64_t>(N) * gen.cfg.latent_dim; ++i)
        tin.latents[b * N * gen.cfg.latent_dim + i] = inputs[b].latents[i];
    hs = gen.bb->forward(g, tin, cb, opt);
  } else {  // MAR: decoder over encoder features with nothing masked
    Tensor<S> lat(Shape{B, N, gen.cfg.latent_dim});
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < static_cast<int64_t>(N) * gen.cfg.latent_dim; ++i)
        lat[b * N * gen.cfg.latent_dim + i] = inputs[b].latents[i];
    MaskSpec none;
    none.grid_h = none.grid_w = gen.cfg.grid;
    ForwardOptions<S> dopt;
    dopt.interventions = iv;
    // reuse the condition pathway; global token comes from the decoder
    Graph<S>& gref = g;
    std::vector<uint8_t> is_masked(N, 0);
    std::vector<int> all_pos(N);
    for (int i = 0; i < N; ++i) all_pos[i] = i;
    TokenInput<S> ein;
    ein.batch = B;
    ein.latents = lat;
    auto ehs = gen.enc_bb->forward(gref, ein, cb);
    Var<S> enc_tokens = gen.token_rows(gref, ehs.final_states, B);
    enc_tokens = reshape(gref, enc_tokens, {B, N, gen.cfg.width});
    std::vector<uint8_t> dflags(static_cast<size_t>(B) * N, 0);
    hs = gen.bb->forward_latent_var(gref, enc_tokens, dflags, cb, dopt);
  }
  Tensor<S> emb = gen.bb->global_token_vec(hs, 0);
  l2_normalize_rows(emb);
  return emb;
}

template <class S>
double pair_similarity(const Tensor<S>& emb, int row_a, int row_b) {
  const int64_t w = emb.cols();
  double dot = 0.0;
  for (int64_t j = 0; j < w; ++j)
    dot += static_cast<double>(emb[row_a * w + j]) * emb[row_b * w + j];
  return dot;
}

// baseline similarity of one contrast pair: normalized global-token dot
template <class S>
double baseline_similarity(const Generator<S>& gen, const AnalysisInput<S>& a,
                           const AnalysisInput<S>& b) {
  Tensor<S> emb = global_embeddings(gen, std::vector<AnalysisInput<S>>{a, b});
  return pair_similarity(emb, 0, 1);
}

// E_f(l, h) per factor/layer/head plus the per-factor baseline similarities
struct HeadEffectMatrix {
  int layers = 0, heads = 0;
  std::vector<std::string> factor_names;
  // effects[f][(l-1)*heads + h]
  std::vector<std::vector<double>> effects;
  std::vector<double> baseline;  // mean baseline similarity per factor

  double at(int factor, int layer, int head) const {
    return effects[factor][(layer - 1) * heads + head];
  }
};

// mean over pairs of (similarity with head (l,h) QKV-ablated - baseline)
template <class S>
HeadEffectMatrix head_effects(const Generator<S>& gen,
                              const std::vector<ContrastPairSet<S>>& pair_sets) {
  HeadEffectMatrix m;
  m.layers = gen.bb->cfg.layers;
  m.heads = gen.cfg.heads;
  for (const auto& ps : pair_sets) {
    std::vector<AnalysisInput<S>> flat;
    for (const auto& [a, b] : ps.pairs) {
      flat.push_back(a);
      flat.push_back(b);
    }
    Tensor<S> base_emb = global_embeddings(gen, flat);
    double base = 0.0;
    for (size_t p = 0; p < ps.pairs.size(); ++p)
      base += pair_similarity(base_emb, 2 * p, 2 * p + 1);
    base /= ps.pairs.size();
    m.baseline.push_back(base);

    std::vector<double> eff(static_cast<size_t>(m.layers) * m.heads, 0.0);
    for (int l = 1; l <= m.layers; ++l)
      for (int h = 0; h < m.heads; ++h) {
        InterventionSpec<S> iv;
        iv.ablate_heads = {{l, h}};
        Tensor<S> emb = global_embeddings(gen, flat, &iv);
        double sim = 0.0;
        for (size_t p = 0; p < ps.pairs.size(); ++p)
          sim += pair_similarity(emb, 2 * p, 2 * p + 1);
        sim /= ps.pairs.size();
        eff[(l - 1) * m.heads + h] = sim - base;
      }
    m.effects.push_back(std::move(eff));
  }
  return m;
}

struct PolysemanticReport {
  std::set<std::pair<int, int>> heads;   // (layer, head), 1-indexed layers
  std::vector<int> per_layer_counts;     // [layers]
};

// a head is polysemantic iff |E_f| > tau for two or more distinct factors
inline PolysemanticReport polysemantic_heads(const HeadEffectMatrix& m, double tau) {
  PolysemanticReport out;
  out.per_layer_counts.assign(m.layers, 0);
  for (int l = 1; l <= m.layers; ++l)
    for (int h = 0; h < m.heads; ++h) {
      int significant = 0;
      for (const auto& eff : m.effects)
        if (std::abs(eff[(l - 1) * m.heads + h]) > tau) ++significant;
      if (significant >= 2) {
        out.heads.insert({l, h});
        ++out.per_layer_counts[l - 1];
      }
    }
  return out;
}

}  // namespace cgl
