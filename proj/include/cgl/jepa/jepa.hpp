// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cgl/backbone/transformer.hpp"
#include "cgl/objectives/masking.hpp"

namespace cgl {

struct JepaConfig {
  std::vector<int> layers;  // 1-indexed backbone layers carrying the loss
  double lambda = 0.0;
  double ema_decay = 0.996;
  double target_ratio = 0.25;
  int predictor_hidden_mult = 2;

  bool enabled() const { return lambda > 0.0 && !layers.empty(); }

  void validate(int backbone_layers) const {
    if (!std::isfinite(lambda) || lambda < 0.0)
      throw std::runtime_error("jepa: lambda must be finite and >= 0");
    for (int l : layers)
      if (l < 1 || l > backbone_layers)
        throw std::runtime_error("jepa: layer " + std::to_string(l) + " outside [1," +
                                 std::to_string(backbone_layers) + "]");
  }

  nlohmann::json to_json() const {
    return {{"layers", layers},
            {"lambda", lambda},
            {"ema_decay", ema_decay},
            {"target_ratio", target_ratio},
            {"predictor_hidden_mult", predictor_hidden_mult}};
  }
  static JepaConfig from_json(const nlohmann::json& j) {
    JepaConfig c;
    c.layers = j.value("layers", std::vector<int>{});
    c.lambda = j.value("lambda", 0.0);
    c.ema_decay = j.value("ema_decay", 0.996);
    c.target_ratio = j.value("target_ratio", 0.25);
    c.predictor_hidden_mult = j.value("predictor_hidden_mult", 2);
    return c;
  }
};

struct ContextTargetMask {
  std::vector<int> context;  // grid positions
  std::vector<int> target;
};

// Targets are spatial blocks; the context is the complement, so the two
// sets are disjoint by construction and sampled independently of the
// MaskGIT mask.
inline ContextTargetMask split_context_target(int h, int w, double target_ratio, Rng& rng) {
  MaskSpec blocks = sample_block_mask(h, w, target_ratio, rng);
  ContextTargetMask out;
  std::vector<uint8_t> is_target(h * w, 0);
  for (int i : blocks.masked) is_target[i] = 1;
  for (int i = 0; i < h * w; ++i)
    (is_target[i] ? out.target : out.context).push_back(i);
  return out;
}

// Per-layer MLP predictors mapping the context-masked hidden sequence plus a
// target position query to the predicted target state.
template <class S>
class PredictorBank {
 public:
  PredictorBank() = default;
  PredictorBank(ParamStore<S>& ps, const Rng& rng, const JepaConfig& cfg, int tokens, int width) {
    cfg_ = cfg;
    tokens_ = tokens;
    width_ = width;
    pos_ = ps.create("jepa.pos", init::normal_<S>(Shape{tokens, width}, rng, "jepa.pos", 0.02));
    for (int l : cfg.layers) {
      const std::string p = "jepa.pred" + std::to_string(l);
      preds_.emplace_back(ps, rng, p, tokens * width + width,
                          cfg.predictor_hidden_mult * width, width);
    }
  }

  int layer_slot(int layer) const {
    for (size_t i = 0; i < cfg_.layers.size(); ++i)
      if (cfg_.layers[i] == layer) return static_cast<int>(i);
    throw std::runtime_error("jepa: no predictor for layer " + std::to_string(layer));
  }

  // online_states / ema_states: [B, seq, width] with the global token (if
  // any) at row 0. Gradients flow through the online/context path and the
  // predictor only; EMA targets enter as constants.
  Var<S> layer_loss(Graph<S>& g, int layer, Var<S> online_states, const Tensor<S>& ema_states,
                    const ContextTargetMask& ct, int token_offset) const {
    if (ct.target.empty()) throw std::runtime_error("jepa: empty target set");
    const int B = online_states->value.shape[0];
    const int seq = online_states->value.shape[1];
    const int w = width_;
    const Mlp<S>& pred = preds_[layer_slot(layer)];

    // zero out non-context token rows (and the global token row)
    std::vector<uint8_t> keep(static_cast<size_t>(B) * seq, 0);
    for (int b = 0; b < B; ++b)
      for (int i : ct.context) keep[b * seq + token_offset + i] = 1;
    Tensor<S> maskt(Shape{B, seq, w});
    for (int64_t r = 0; r < static_cast<int64_t>(B) * seq; ++r)
      if (keep[r])
        for (int j = 0; j < w; ++j) maskt[r * w + j] = S(1);
    Var<S> ctx = mul(g, online_states, g.constant(maskt));
    Var<S> flat = reshape(g, ctx, {B, seq * w});
    if (token_offset) flat = slice_last(g, flat, w, tokens_ * w);  // drop the global row

    const int nt = static_cast<int>(ct.target.size());
    // replicate the context row once per target, append the target query
    std::vector<int> rep(static_cast<size_t>(B) * nt);
    std::vector<int> tgt_rows(static_cast<size_t>(B) * nt);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < nt; ++k) {
        rep[b * nt + k] = b;
        tgt_rows[b * nt + k] = ct.target[k];
      }
    Var<S> ctx_rep = gather_rows(g, flat, rep);
    Var<S> queries = gather_rows(g, use(g, pos_), tgt_rows);
    Var<S> pred_in = concat_last(g, {ctx_rep, queries});
    Var<S> pred_out = pred.fwd(g, pred_in);  // [B*nt, w]

    Tensor<S> target_vals(Shape{B * nt, w});
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < nt; ++k)
        for (int j = 0; j < w; ++j)
          target_vals[(b * nt + k) * static_cast<int64_t>(w) + j] =
              ema_states[((static_cast<int64_t>(b) * seq) + token_offset + ct.target[k]) * w + j];
    return mse_mean(g, pred_out, g.constant(target_vals));
  }

 private:
  JepaConfig cfg_;
  int tokens_ = 0, width_ = 0;
  Param<S>* pos_ = nullptr;
  std::vector<Mlp<S>> preds_;
};

// L_total = L_MG + lambda * sum of per-layer losses
template <class S>
Var<S> jepa_total_loss(Graph<S>& g, Var<S> l_mg, const std::vector<Var<S>>& layer_losses,
                       double lambda) {
  Var<S> total = l_mg;
  if (lambda != 0.0 && !layer_losses.empty()) {
    Var<S> acc = layer_losses[0];
    for (size_t i = 1; i < layer_losses.size(); ++i) acc = add(g, acc, layer_losses[i]);
    total = add(g, total, scale(g, acc, lambda));
  }
  return total;
}

inline double jepa_total_loss(double l_mg, const std::vector<double>& layer_losses,
                              double lambda) {
  double acc = 0.0;
  for (double l : layer_losses) acc += l;
  return l_mg + lambda * acc;
}

}  // namespace cgl
