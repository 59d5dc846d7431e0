// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgl/core/nn.hpp"

namespace cgl {

enum class InputMode { kCodeEmbedding, kContinuousLatent };

// how a factor enters the conditioning MLP when given un-quantized
enum class CondKind { kLabelOnly, kHue, kScalar };

struct CondFactorSpec {
  std::string name;
  int cardinality = 2;
  CondKind kind = CondKind::kLabelOnly;
};

struct TransformerConfig {
  int layers = 12;
  int heads = 8;
  int width = 256;
  int mlp_width = 0;  // 0 -> 4*width
  InputMode input_mode = InputMode::kCodeEmbedding;
  bool global_token = true;
  int tokens = 64;      // grid positions, excluding the global token
  int vocab = 256;      // code-embedding mode
  int latent_dim = 16;  // continuous mode
  bool with_timestep = false;
  std::vector<CondFactorSpec> cond_factors;

  int mlp() const { return mlp_width > 0 ? mlp_width : 4 * width; }
  int seq_len() const { return tokens + (global_token ? 1 : 0); }
  int token_offset() const { return global_token ? 1 : 0; }

  void validate() const {
    if (layers < 2) throw std::runtime_error("backbone: need at least 2 layers");
    if (width % heads != 0) throw std::runtime_error("backbone: width not divisible by heads");
  }

  nlohmann::json to_json() const {
    nlohmann::json jf = nlohmann::json::array();
    for (const auto& f : cond_factors)
      jf.push_back({{"name", f.name},
                    {"cardinality", f.cardinality},
                    {"kind", f.kind == CondKind::kHue      ? "hue"
                             : f.kind == CondKind::kScalar ? "scalar"
                                                           : "label"}});
    return {{"layers", layers},   {"heads", heads},
            {"width", width},     {"mlp_width", mlp_width},
            {"input_mode", input_mode == InputMode::kCodeEmbedding ? "code" : "continuous"},
            {"global_token", global_token},
            {"tokens", tokens},   {"vocab", vocab},
            {"latent_dim", latent_dim},
            {"with_timestep", with_timestep},
            {"cond_factors", jf}};
  }

  static TransformerConfig from_json(const nlohmann::json& j) {
    TransformerConfig c;
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.width = j.at("width");
    c.mlp_width = j.value("mlp_width", 0);
    c.input_mode = j.at("input_mode") == "code" ? InputMode::kCodeEmbedding
                                                : InputMode::kContinuousLatent;
    c.global_token = j.at("global_token");
    c.tokens = j.at("tokens");
    c.vocab = j.value("vocab", 256);
    c.latent_dim = j.value("latent_dim", 16);
    c.with_timestep = j.value("with_timestep", false);
    for (const auto& jf : j.value("cond_factors", nlohmann::json::array())) {
      CondFactorSpec f;
      f.name = jf.at("name");
      f.cardinality = jf.at("cardinality");
      const std::string k = jf.at("kind");
      f.kind = k == "hue" ? CondKind::kHue : k == "scalar" ? CondKind::kScalar : CondKind::kLabelOnly;
      c.cond_factors.push_back(f);
    }
    return c;
  }
};

// per-factor conditioning entry; absent factors use a learned null embedding
struct ConditionVector {
  struct Entry {
    bool present = true;
    bool quantized = true;
    int label = 0;
    double value = 0.0;  // continuous realization, used when !quantized
  };
  std::vector<Entry> entries;
};

// layers are 1-indexed (1..L) at this surface; heads and neurons 0-indexed
template <class S>
struct InterventionSpec {
  std::vector<std::pair<int, int>> ablate_heads;
  struct NeuronPatch {
    int layer = 1;
    int neuron = 0;
    Tensor<S> values;  // [B*seq_len] replacement; empty => zero
  };
  std::vector<NeuronPatch> patches;

  bool empty() const { return ablate_heads.empty() && patches.empty(); }

  void validate(const TransformerConfig& cfg) const {
    for (auto [l, h] : ablate_heads)
      if (l < 1 || l > cfg.layers || h < 0 || h >= cfg.heads)
        throw std::runtime_error("intervention: head index out of range (layer " +
                                 std::to_string(l) + ", head " + std::to_string(h) + ")");
    for (const auto& p : patches)
      if (p.layer < 1 || p.layer > cfg.layers || p.neuron < 0 || p.neuron >= cfg.mlp())
        throw std::runtime_error("intervention: neuron index out of range (layer " +
                                 std::to_string(p.layer) + ", neuron " +
                                 std::to_string(p.neuron) + ")");
  }
};

template <class S>
struct HiddenStates {
  std::vector<int> layers;      // recorded layer ids, 1-indexed
  std::vector<Var<S>> states;   // [B, seq, w] after each recorded block
  std::vector<Var<S>> mlp_acts; // post-GELU MLP activations per block (record_mlp)
  std::vector<Var<S>> mlp_pre;  // fc1 preactivations per block (record_mlp)
  Var<S> final_states = nullptr;  // after final layernorm

  Var<S> at_layer(int layer) const {
    for (size_t i = 0; i < layers.size(); ++i)
      if (layers[i] == layer) return states[i];
    throw std::runtime_error("hidden states: layer " + std::to_string(layer) + " not recorded");
  }
};

template <class S>
struct ForwardOptions {
  const InterventionSpec<S>* interventions = nullptr;
  std::vector<int> record_layers;
  bool record_mlp = false;
};

// token inputs: codes (code mode) or latents (continuous mode), plus an
// optional per-position replace-with-[MASK] flag. positions restricts the
// forward to a subset of grid positions (shared across the batch); empty
// means the full grid.
template <class S>
struct TokenInput {
  int batch = 0;
  std::vector<int> codes;       // batch*n_positions
  Tensor<S> latents;            // [batch, n_positions, latent_dim]
  std::vector<uint8_t> masked;  // batch*n_positions; empty = none
  std::vector<int> positions;   // subset of [0, tokens); empty = all
};

struct CondBatch {
  std::vector<ConditionVector> cond;
  std::vector<double> t;  // diffusion timestep per sample (with_timestep only)
};

// Bidirectional transformer shared by every generative family: embeds codes
// or latents, applies adaLN conditioning, optionally prepends a global
// aggregation token, records hidden states, applies interventions.
template <class S>
class Backbone {
 public:
  TransformerConfig cfg;

  Backbone(ParamStore<S>& ps, const Rng& rng, TransformerConfig config,
           const std::string& prefix = "bb")
      : cfg(config) {
    cfg.validate();
    const int w = cfg.width;
    const std::string& px = prefix;
    if (cfg.input_mode == InputMode::kCodeEmbedding)
      code_emb_ = ps.create(px + ".code_emb",
                            init::normal_<S>(Shape{cfg.vocab, w}, rng, px + ".code_emb", 0.02));
    else
      in_proj_ = Linear<S>(ps, rng, px + ".in_proj", cfg.latent_dim, w);
    mask_token_ = ps.create(px + ".mask_token",
                            init::normal_<S>(Shape{w}, rng, px + ".mask_token", 0.02));
    pos_ = ps.create(px + ".pos", init::normal_<S>(Shape{cfg.tokens, w}, rng, px + ".pos", 0.02));
    if (cfg.global_token)
      global_ = ps.create(px + ".global", init::normal_<S>(Shape{w}, rng, px + ".global", 0.02));

    // conditioning embedder: per-factor label tables / feature projections
    for (size_t f = 0; f < cfg.cond_factors.size(); ++f) {
      const auto& fs = cfg.cond_factors[f];
      const std::string p = px + ".cond.f" + std::to_string(f);
      FactorEmb fe;
      fe.labels = ps.create(p + ".labels",
                            init::normal_<S>(Shape{fs.cardinality, w}, rng, p + ".labels", 0.02));
      fe.null = ps.create(p + ".null", init::normal_<S>(Shape{w}, rng, p + ".null", 0.02));
      if (fs.kind != CondKind::kLabelOnly) {
        const int feat = fs.kind == CondKind::kHue ? 2 : 1;
        fe.proj = Linear<S>(ps, rng, p + ".proj", feat, w);
      }
      factor_embs_.push_back(fe);
    }
    const int fcat = static_cast<int>(cfg.cond_factors.size()) * w;
    cond_mlp_ = Mlp<S>(ps, rng, px + ".cond.mlp", std::max(fcat, 1), 2 * w, w);
    if (cfg.with_timestep) {
      t_fc1_ = Linear<S>(ps, rng, px + ".t.fc1", w, w);
      t_fc2_ = Linear<S>(ps, rng, px + ".t.fc2", w, w);
    }

    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = px + ".block" + std::to_string(l);
      Block blk;
      blk.ln1 = LayerNorm<S>(ps, p + ".ln1", w);
      blk.ln2 = LayerNorm<S>(ps, p + ".ln2", w);
      blk.qkv = Linear<S>(ps, rng, p + ".qkv", w, 3 * w);
      blk.proj = Linear<S>(ps, rng, p + ".proj", w, w);
      blk.fc1 = Linear<S>(ps, rng, p + ".fc1", w, cfg.mlp());
      blk.fc2 = Linear<S>(ps, rng, p + ".fc2", cfg.mlp(), w);
      // adaLN-zero: modulation starts at identity, gates at zero
      blk.mod = Linear<S>(ps, rng, p + ".mod", w, 6 * w, true, 0.0);
      blocks_.push_back(blk);
    }
    ln_f_ = LayerNorm<S>(ps, px + ".ln_f", w);
  }

  // Maps conditioning (and timestep) to the shared modulation input; the
  // per-block scale/shift/gate come from each block's own linear head.
  Var<S> embed_condition(Graph<S>& g, const CondBatch& cb) const {
    const int B = static_cast<int>(cb.cond.size());
    const int w = cfg.width;
    std::vector<Var<S>> parts;
    for (size_t f = 0; f < cfg.cond_factors.size(); ++f) {
      Tensor<S> feat;  // continuous features, filled per sample
      const auto& fs = cfg.cond_factors[f];
      const int featdim = fs.kind == CondKind::kHue ? 2 : 1;
      feat = Tensor<S>(Shape{B, featdim});
      std::vector<int> labels(B, 0);
      std::vector<uint8_t> use_null(B, 0), use_cont(B, 0);
      for (int b = 0; b < B; ++b) {
        const auto& e = cb.cond[b].entries.at(f);
        if (!e.present) {
          use_null[b] = 1;
        } else if (!e.quantized && fs.kind != CondKind::kLabelOnly) {
          use_cont[b] = 1;
          if (fs.kind == CondKind::kHue) {
            feat[b * 2] = static_cast<S>(std::cos(2.0 * M_PI * e.value));
            feat[b * 2 + 1] = static_cast<S>(std::sin(2.0 * M_PI * e.value));
          } else {
            feat[b] = static_cast<S>(e.value);
          }
        } else {
          labels[b] = e.label;
        }
      }
      Var<S> lab = embedding(g, use(g, factor_embs_[f].labels), labels);  // [B,w]
      Var<S> out = lab;
      if (factor_embs_[f].proj.w) {
        Var<S> cont = factor_embs_[f].proj.fwd(g, g.constant(feat));
        // select continuous rows where flagged
        Tensor<S> sel(Shape{B, 1});
        for (int b = 0; b < B; ++b) sel[b] = use_cont[b] ? S(1) : S(0);
        Var<S> selv = g.constant(sel);
        // out = lab*(1-sel) + cont*sel, broadcast per row
        Var<S> ones = g.constant(Tensor<S>(Shape{B, 1}, S(1)));
        out = add(g, rowscale(g, lab, sub(g, ones, selv)), rowscale(g, cont, selv));
      }
      // absent factors fall back to the learned null embedding
      Var<S> nullrow = use(g, factor_embs_[f].null);
      out = blend_rows(g, out, use_null, nullrow);
      parts.push_back(out);
    }
    Var<S> cat = parts.empty() ? g.constant(Tensor<S>(Shape{B, 1})) : concat_last(g, parts);
    Var<S> c = cond_mlp_.fwd(g, cat);
    if (cfg.with_timestep) {
      if (static_cast<int>(cb.t.size()) != B)
        throw std::runtime_error("backbone: missing timestep for diffusion conditioning");
      Tensor<S> sinus = timestep_features(cb.t);
      Var<S> te = t_fc2_.fwd(g, silu(g, t_fc1_.fwd(g, g.constant(sinus))));
      c = add(g, c, te);
    }
    return silu(g, c);
  }

  HiddenStates<S> forward(Graph<S>& g, const TokenInput<S>& in, const CondBatch& cb,
                          const ForwardOptions<S>& opt = {}) const {
    const int B = in.batch;
    const int N = in.positions.empty() ? cfg.tokens : static_cast<int>(in.positions.size());
    for (int p : in.positions)
      if (p < 0 || p >= cfg.tokens) throw std::runtime_error("backbone: position out of range");

    Var<S> x;  // [B*N, w]
    if (cfg.input_mode == InputMode::kCodeEmbedding) {
      if (static_cast<int>(in.codes.size()) != B * N)
        throw std::runtime_error("backbone: codes size mismatch");
      x = embedding(g, use(g, code_emb_), in.codes);
    } else {
      if (in.latents.shape != Shape{B, N, cfg.latent_dim})
        throw std::runtime_error("backbone: latent shape mismatch, expected [B,N,d]=[" +
                                 std::to_string(B) + "," + std::to_string(N) + "," +
                                 std::to_string(cfg.latent_dim) + "] got " +
                                 shape_str(in.latents.shape));
      x = in_proj_.fwd(g, g.constant(in.latents.reshaped({B * N, cfg.latent_dim})));
    }
    return embed_and_run(g, x, B, N, in.masked, in.positions, cb, opt);
  }

  // Variant whose latent input stays on the gradient path (MAR feeds its
  // encoder output through here).
  HiddenStates<S> forward_latent_var(Graph<S>& g, Var<S> latents,
                                     const std::vector<uint8_t>& masked, const CondBatch& cb,
                                     const ForwardOptions<S>& opt = {}) const {
    if (cfg.input_mode != InputMode::kContinuousLatent)
      throw std::runtime_error("backbone: forward_latent_var needs continuous input mode");
    const Shape& sh = latents->value.shape;
    const int B = sh[0], N = sh[1];
    Var<S> x = in_proj_.fwd(g, reshape(g, latents, {B * N, cfg.latent_dim}));
    return embed_and_run(g, x, B, N, masked, {}, cb, opt);
  }

 private:
  HiddenStates<S> embed_and_run(Graph<S>& g, Var<S> x, int B, int N,
                                const std::vector<uint8_t>& masked,
                                const std::vector<int>& positions, const CondBatch& cb,
                                const ForwardOptions<S>& opt) const {
    if (opt.interventions) opt.interventions->validate(cfg);
    const int w = cfg.width;
    if (!masked.empty()) {
      if (static_cast<int>(masked.size()) != B * N)
        throw std::runtime_error("backbone: mask size mismatch");
      x = blend_rows(g, x, masked, use(g, mask_token_));
    }
    x = reshape(g, x, {B, N, w});
    Var<S> pos_rows =
        positions.empty() ? use(g, pos_) : gather_rows(g, use(g, pos_), positions);
    if (positions.empty() && N != cfg.tokens)
      throw std::runtime_error("backbone: token count mismatch");
    x = add_tokenwise(g, x, pos_rows);
    if (cfg.global_token) x = prepend_token(g, x, use(g, global_));

    Var<S> c = embed_condition(g, cb);

    HiddenStates<S> hs;
    for (int l = 0; l < cfg.layers; ++l) {
      const Block& blk = blocks_[l];
      Var<S> mod = blk.mod.fwd(g, c);  // [B, 6w]
      Var<S> s1 = slice_last(g, mod, 0, w);
      Var<S> b1 = slice_last(g, mod, w, w);
      Var<S> g1 = slice_last(g, mod, 2 * w, w);
      Var<S> s2 = slice_last(g, mod, 3 * w, w);
      Var<S> b2 = slice_last(g, mod, 4 * w, w);
      Var<S> g2 = slice_last(g, mod, 5 * w, w);

      std::vector<uint8_t> keep(cfg.heads, 1);
      if (opt.interventions)
        for (auto [al, ah] : opt.interventions->ablate_heads)
          if (al == l + 1) keep[ah] = 0;

      Var<S> h = affine_tokens(g, blk.ln1.fwd(g, x), s1, b1);
      Var<S> att = attention(g, blk.qkv.fwd(g, h), cfg.heads, keep);
      x = add(g, x, gate_tokens(g, blk.proj.fwd(g, att), g1));

      Var<S> h2 = affine_tokens(g, blk.ln2.fwd(g, x), s2, b2);
      Var<S> pre = blk.fc1.fwd(g, h2);  // [B, seq, mlp]
      if (opt.record_mlp) hs.mlp_pre.push_back(pre);
      Var<S> act = gelu(g, pre);
      if (opt.interventions) {
        std::vector<int> cols;
        std::vector<const typename InterventionSpec<S>::NeuronPatch*> hits;
        for (const auto& p : opt.interventions->patches)
          if (p.layer == l + 1) {
            cols.push_back(p.neuron);
            hits.push_back(&p);
          }
        if (!cols.empty()) {
          const int64_t rows = static_cast<int64_t>(B) * (N + cfg.token_offset());
          Tensor<S> vals(Shape{static_cast<int>(rows), static_cast<int>(cols.size())});
          for (size_t k = 0; k < hits.size(); ++k) {
            if (hits[k]->values.defined()) {
              if (hits[k]->values.size() != rows)
                throw std::runtime_error("intervention: patch values length mismatch");
              for (int64_t r = 0; r < rows; ++r)
                vals[r * cols.size() + k] = hits[k]->values[r];
            }  // else zeros
          }
          act = replace_cols(g, act, cols, vals);
        }
      }
      if (opt.record_mlp) hs.mlp_acts.push_back(act);
      x = add(g, x, gate_tokens(g, blk.fc2.fwd(g, act), g2));

      for (int rl : opt.record_layers)
        if (rl == l + 1) {
          hs.layers.push_back(rl);
          hs.states.push_back(x);
        }
    }
    hs.final_states = ln_f_.fwd(g, x);
    return hs;
  }

 public:
  // aggregation token's vector at a recorded layer (0 = after final norm)
  Tensor<S> global_token_vec(const HiddenStates<S>& hs, int layer) const {
    if (!cfg.global_token) throw std::runtime_error("backbone: global token disabled");
    Var<S> h = layer == 0 ? hs.final_states : hs.at_layer(layer);
    const int w = cfg.width;
    Tensor<S> out(Shape{h->value.shape[0], w});
    for (int b = 0; b < h->value.shape[0]; ++b)
      for (int j = 0; j < w; ++j)
        out[b * w + j] = h->value[(static_cast<int64_t>(b) * cfg.seq_len()) * w + j];
    return out;
  }

 private:
  struct FactorEmb {
    Param<S>* labels = nullptr;
    Param<S>* null = nullptr;
    Linear<S> proj;
  };
  struct Block {
    LayerNorm<S> ln1, ln2;
    Linear<S> qkv, proj, fc1, fc2, mod;
  };

  // y[b,:] = x[b,:] * s[b] with s [B,1]
  static Var<S> rowscale(Graph<S>& g, Var<S> x, Var<S> s) {
    const int B = x->value.shape[0];
    const int w = static_cast<int>(x->value.cols());
    Var<S> gate = matmul(g, s, g.constant(Tensor<S>(Shape{1, w}, S(1))));  // [B,w]
    return reshape(g, gate_tokens(g, reshape(g, x, {B, 1, w}), gate), {B, w});
  }

  Tensor<S> timestep_features(const std::vector<double>& t) const {
    const int w = cfg.width;
    const int half = w / 2;
    Tensor<S> out(Shape{static_cast<int>(t.size()), w});
    for (size_t b = 0; b < t.size(); ++b)
      for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[b * w + i] = static_cast<S>(std::sin(t[b] * freq));
        out[b * w + half + i] = static_cast<S>(std::cos(t[b] * freq));
      }
    return out;
  }

  Param<S>* code_emb_ = nullptr;
  Linear<S> in_proj_;
  Param<S>* mask_token_ = nullptr;
  Param<S>* pos_ = nullptr;
  Param<S>* global_ = nullptr;
  std::vector<FactorEmb> factor_embs_;
  Mlp<S> cond_mlp_;
  Linear<S> t_fc1_, t_fc2_;
  std::vector<Block> blocks_;
  LayerNorm<S> ln_f_;
};

}  // namespace cgl
