// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cgl/backbone/transformer.hpp"
#include "cgl/jepa/jepa.hpp"
#include "cgl/objectives/conditioning.hpp"
#include "cgl/objectives/masking.hpp"
#include "cgl/objectives/schedule.hpp"
#include "cgl/tokenizer/tokenizer.hpp"

namespace cgl {

enum class Family { kMaskGit, kGivt, kMar, kDit };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::kMaskGit: return "maskgit";
    case Family::kGivt: return "givt";
    case Family::kMar: return "mar";
    case Family::kDit: return "dit";
  }
  return "?";
}

inline Family family_from(const std::string& s) {
  if (s == "maskgit") return Family::kMaskGit;
  if (s == "givt") return Family::kGivt;
  if (s == "mar") return Family::kMar;
  if (s == "dit") return Family::kDit;
  throw std::runtime_error("unknown model family '" + s + "'");
}

struct GeneratorConfig {
  Family family = Family::kMaskGit;
  int layers = 12;
  int heads = 8;
  int width = 256;
  int mlp_width = 0;
  bool global_token = true;
  int grid = 8;
  int K = 256;
  int latent_dim = 16;
  std::vector<CondFactorSpec> cond_factors;
  int mar_enc_layers = 6;
  int diffusion_T = 1000;      // DiT schedule length
  int token_T = 100;           // MAR per-token head schedule length
  int gmm_components = 4;
  double var_floor = 1e-4;
  int sample_steps = 8;        // masking-family unmasking iterations
  double temperature = 1.0;
  long steps = 3000;
  int batch = 64;
  double lr = 3e-4;
  CondRegime regime = CondRegime::kFull;
  double dropout_p = 0.1;
  uint64_t seed = 0;
  double latent_scale = 1.0;  // latents are scaled to unit variance for training
  JepaConfig jepa;

  int tokens() const { return grid * grid; }
  bool masking_based() const { return family != Family::kDit; }
  bool continuous_latents() const { return family != Family::kMaskGit; }

  TransformerConfig backbone_config() const {
    TransformerConfig bc;
    bc.layers = family == Family::kMar ? layers - mar_enc_layers : layers;
    bc.heads = heads;
    bc.width = width;
    bc.mlp_width = mlp_width;
    bc.input_mode = family == Family::kMaskGit ? InputMode::kCodeEmbedding
                                               : InputMode::kContinuousLatent;
    bc.global_token = global_token;
    bc.tokens = tokens();
    bc.vocab = K;
    bc.latent_dim = family == Family::kMar ? width : latent_dim;
    bc.with_timestep = family == Family::kDit;
    bc.cond_factors = cond_factors;
    return bc;
  }

  TransformerConfig mar_encoder_config() const {
    TransformerConfig bc = backbone_config();
    bc.layers = mar_enc_layers;
    bc.latent_dim = latent_dim;
    bc.global_token = global_token;
    return bc;
  }

  void validate() const {
    if (family == Family::kMar && (mar_enc_layers < 1 || mar_enc_layers >= layers))
      throw std::runtime_error("generator: mar encoder split out of range");
    jepa.validate(family == Family::kMar ? layers - mar_enc_layers : layers);
    if (jepa.enabled() && family != Family::kMaskGit)
      throw std::runtime_error("generator: the auxiliary JEPA objective applies to maskgit only");
  }

  nlohmann::json to_json() const {
    nlohmann::json jf = nlohmann::json::array();
    for (const auto& f : cond_factors)
      jf.push_back({{"name", f.name},
                    {"cardinality", f.cardinality},
                    {"kind", f.kind == CondKind::kHue      ? "hue"
                             : f.kind == CondKind::kScalar ? "scalar"
                                                           : "label"}});
    return {{"family", to_string(family)},
            {"layers", layers},
            {"heads", heads},
            {"width", width},
            {"mlp_width", mlp_width},
            {"global_token", global_token},
            {"grid", grid},
            {"K", K},
            {"latent_dim", latent_dim},
            {"cond_factors", jf},
            {"mar_enc_layers", mar_enc_layers},
            {"diffusion_T", diffusion_T},
            {"token_T", token_T},
            {"gmm_components", gmm_components},
            {"var_floor", var_floor},
            {"sample_steps", sample_steps},
            {"temperature", temperature},
            {"steps", steps},
            {"batch", batch},
            {"lr", lr},
            {"regime", to_string(regime)},
            {"dropout_p", dropout_p},
            {"seed", seed},
            {"latent_scale", latent_scale},
            {"jepa", jepa.to_json()}};
  }

  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.family = family_from(j.at("family"));
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.width = j.at("width");
    c.mlp_width = j.value("mlp_width", 0);
    c.global_token = j.value("global_token", true);
    c.grid = j.at("grid");
    c.K = j.value("K", 256);
    c.latent_dim = j.value("latent_dim", 16);
    for (const auto& jf : j.value("cond_factors", nlohmann::json::array())) {
      CondFactorSpec f;
      f.name = jf.at("name");
      f.cardinality = jf.at("cardinality");
      const std::string k = jf.at("kind");
      f.kind = k == "hue" ? CondKind::kHue : k == "scalar" ? CondKind::kScalar : CondKind::kLabelOnly;
      c.cond_factors.push_back(f);
    }
    c.mar_enc_layers = j.value("mar_enc_layers", 6);
    c.diffusion_T = j.value("diffusion_T", 1000);
    c.token_T = j.value("token_T", 100);
    c.gmm_components = j.value("gmm_components", 4);
    c.var_floor = j.value("var_floor", 1e-4);
    c.sample_steps = j.value("sample_steps", 8);
    c.temperature = j.value("temperature", 1.0);
    c.steps = j.value("steps", 3000L);
    c.batch = j.value("batch", 64);
    c.lr = j.value("lr", 3e-4);
    c.regime = cond_regime_from(j.value("regime", std::string("full")));
    c.dropout_p = j.value("dropout_p", 0.1);
    c.seed = j.value("seed", uint64_t{0});
    c.latent_scale = j.value("latent_scale", 1.0);
    c.jepa = JepaConfig::from_json(j.value("jepa", nlohmann::json::object()));
    return c;
  }
};

// Plain GMM head parameters (the frozen inference surface of the GIVT head).
template <class S>
struct GMMHeadParams {
  int m = 0, d = 0;
  Tensor<S> weights;  // [N, m], nonnegative, rows sum to 1
  Tensor<S> means;    // [N, m*d]
  Tensor<S> vars;     // [N, m*d], >= floor

  void validate(double var_floor) const {
    const int64_t n = weights.rows();
    for (int64_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int j = 0; j < m; ++j) {
        if (weights[i * m + j] < S(0))
          throw std::runtime_error("gmm params: negative weight at token " + std::to_string(i));
        sum += weights[i * m + j];
      }
      if (std::abs(sum - 1.0) > 1e-6)
        throw std::runtime_error("gmm params: weights do not sum to 1 at token " +
                                 std::to_string(i));
    }
    for (int64_t i = 0; i < vars.size(); ++i)
      if (static_cast<double>(vars[i]) < var_floor - 1e-12)
        throw std::runtime_error("gmm params: degenerate variance below floor");
  }
};

// mean over masked positions of -log softmax(logits)[target]
template <class S>
double maskgit_loss(const Tensor<S>& logits, const TokenGrid& targets, const MaskSpec& mask) {
  if (mask.masked.empty()) throw std::runtime_error("maskgit_loss: empty mask");
  const int64_t K = logits.cols();
  double acc = 0.0;
  for (int i : mask.masked) {
    const S* row = logits.data() + static_cast<int64_t>(i) * K;
    S mx = row[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double lse = 0.0;
    for (int64_t k = 0; k < K; ++k) lse += std::exp(static_cast<double>(row[k] - mx));
    acc -= static_cast<double>(row[targets.codes[i]] - mx) - std::log(lse);
  }
  return acc / mask.masked.size();
}

// mean over masked positions of -log sum_j w_j N(target; mu_j, diag var_j)
template <class S>
double givt_loss(const GMMHeadParams<S>& params, const LatentGrid<S>& targets,
                 const MaskSpec& mask, double var_floor = 1e-4) {
  if (mask.masked.empty()) throw std::runtime_error("givt_loss: empty mask");
  params.validate(var_floor);
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  const int m = params.m, d = params.d;
  double acc = 0.0;
  for (int i : mask.masked) {
    std::vector<double> t(m);
    for (int j = 0; j < m; ++j) {
      double logn = 0.0;
      for (int k = 0; k < d; ++k) {
        const int64_t off = (static_cast<int64_t>(i) * m + j) * d + k;
        const double var = params.vars[off];
        const double diff = static_cast<double>(targets.data[i * d + k]) - params.means[off];
        logn -= 0.5 * (diff * diff / var + std::log(var) + kLog2Pi);
      }
      t[j] = std::log(std::max(1e-300, static_cast<double>(params.weights[i * m + j]))) + logn;
    }
    double tmax = t[0];
    for (int j = 1; j < m; ++j) tmax = std::max(tmax, t[j]);
    double lse = 0.0;
    for (int j = 0; j < m; ++j) lse += std::exp(t[j] - tmax);
    acc -= tmax + std::log(lse);
  }
  return acc / mask.masked.size();
}

// The shared-backbone generative model for one family, including heads and
// (for maskgit) the optional JEPA predictor bank. All weights live in one
// named store so EMA copies and checkpoints stay aligned.
template <class S>
class Generator {
 public:
  GeneratorConfig cfg;
  ParamStore<S> params;
  std::unique_ptr<Backbone<S>> bb;      // main backbone (decoder for MAR)
  std::unique_ptr<Backbone<S>> enc_bb;  // MAR encoder
  Linear<S> head;                       // family-specific output head
  Linear<S> dh_in, dh_mid, dh_out;      // MAR per-token diffusion head
  DiffusionSchedule sched;              // DiT (or MAR per-token) schedule
  std::optional<PredictorBank<S>> predictors;

  explicit Generator(GeneratorConfig config) : cfg(std::move(config)) {
    cfg.validate();
    const Rng rng(cfg.seed);
    bb = std::make_unique<Backbone<S>>(params, rng, cfg.backbone_config());
    const int w = cfg.width;
    switch (cfg.family) {
      case Family::kMaskGit:
        head = Linear<S>(params, rng, "head", w, cfg.K);
        break;
      case Family::kGivt:
        head = Linear<S>(params, rng, "head", w,
                         cfg.gmm_components * (1 + 2 * cfg.latent_dim));
        break;
      case Family::kDit:
        head = Linear<S>(params, rng, "head", w, cfg.latent_dim, true, 0.1);
        break;
      case Family::kMar: {
        enc_bb = std::make_unique<Backbone<S>>(params, rng, cfg.mar_encoder_config(), "enc");
        const int hh = 2 * w;
        const int t_feat = 32;
        dh_in = Linear<S>(params, rng, "dhead.in", cfg.latent_dim + w + t_feat, hh);
        dh_mid = Linear<S>(params, rng, "dhead.mid", hh, hh);
        dh_out = Linear<S>(params, rng, "dhead.out", hh, cfg.latent_dim, true, 0.1);
        break;
      }
    }
    sched = DiffusionSchedule::linear(cfg.family == Family::kMar ? cfg.token_T : cfg.diffusion_T);
    if (cfg.jepa.enabled())
      predictors.emplace(params, rng, cfg.jepa, cfg.tokens(), w);
  }

  // ---- family forwards (token rows only; the global token is dropped) ----

  Var<S> token_rows(Graph<S>& g, Var<S> states, int batch) const {
    const int seq = states->value.shape[1];
    const int off = cfg.global_token ? 1 : 0;
    if (!cfg.global_token) return reshape(g, states, {batch * seq, cfg.width});
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(batch) * (seq - 1));
    for (int b = 0; b < batch; ++b)
      for (int i = off; i < seq; ++i) rows.push_back(b * seq + i);
    return gather_rows(g, reshape(g, states, {batch * seq, cfg.width}), rows);
  }

  // logits over the vocabulary at every grid position: [B*N, K]
  Var<S> maskgit_logits(Graph<S>& g, const std::vector<int>& codes,
                        const std::vector<uint8_t>& masked, const CondBatch& cb,
                        const ForwardOptions<S>& opt = {}, HiddenStates<S>* hs_out = nullptr) const {
    TokenInput<S> in;
    in.batch = static_cast<int>(cb.cond.size());
    in.codes = codes;
    in.masked = masked;
    auto hs = bb->forward(g, in, cb, opt);
    if (hs_out) *hs_out = hs;
    return head.fwd(g, token_rows(g, hs.final_states, in.batch));
  }

  // GMM head parameters at every grid position
  struct GmmOut {
    Var<S> wlogits, mu, logvar;  // [B*N, m], [B*N, m*d] x2
  };
  GmmOut givt_params(Graph<S>& g, const Tensor<S>& latents, const std::vector<uint8_t>& masked,
                     const CondBatch& cb, const ForwardOptions<S>& opt = {}) const {
    TokenInput<S> in;
    in.batch = static_cast<int>(cb.cond.size());
    in.latents = latents;
    in.masked = masked;
    auto hs = bb->forward(g, in, cb, opt);
    Var<S> out = head.fwd(g, token_rows(g, hs.final_states, in.batch));
    const int m = cfg.gmm_components, d = cfg.latent_dim;
    GmmOut go;
    go.wlogits = slice_last(g, out, 0, m);
    go.mu = slice_last(g, out, m, m * d);
    go.logvar = slice_last(g, out, m + m * d, m * d);
    return go;
  }

  // predicted noise at every grid position: [B*N, d]
  Var<S> dit_eps(Graph<S>& g, const Tensor<S>& noisy_latents, const CondBatch& cb,
                 const ForwardOptions<S>& opt = {}) const {
    TokenInput<S> in;
    in.batch = static_cast<int>(cb.cond.size());
    in.latents = noisy_latents;
    auto hs = bb->forward(g, in, cb, opt);
    return head.fwd(g, token_rows(g, hs.final_states, in.batch));
  }

  // MAR: encoder over unmasked positions, decoder over the full grid;
  // returns the per-position condition vectors [B*N, width]
  Var<S> mar_conditions(Graph<S>& g, const Tensor<S>& latents, const MaskSpec& mask,
                        const CondBatch& cb, const ForwardOptions<S>& opt = {}) const {
    const int B = static_cast<int>(cb.cond.size());
    const int N = cfg.tokens();
    const int w = cfg.width;
    std::vector<uint8_t> is_masked(N, 0);
    for (int i : mask.masked) is_masked[i] = 1;
    std::vector<int> unmasked;
    for (int i = 0; i < N; ++i)
      if (!is_masked[i]) unmasked.push_back(i);

    Var<S> enc_tokens = nullptr;  // [B, Nu, w]
    if (!unmasked.empty()) {
      TokenInput<S> ein;
      ein.batch = B;
      ein.positions = unmasked;
      const int nu = static_cast<int>(unmasked.size());
      Tensor<S> sub(Shape{B, nu, cfg.latent_dim});
      for (int b = 0; b < B; ++b)
        for (int u = 0; u < nu; ++u)
          for (int k = 0; k < cfg.latent_dim; ++k)
            sub[(static_cast<int64_t>(b) * nu + u) * cfg.latent_dim + k] =
                latents[(static_cast<int64_t>(b) * N + unmasked[u]) * cfg.latent_dim + k];
      ein.latents = sub;
      auto ehs = enc_bb->forward(g, ein, cb);
      enc_tokens = token_rows(g, ehs.final_states, B);        // [B*Nu, w]
      enc_tokens = reshape(g, enc_tokens, {B, nu, w});
    }

    // scatter encoder features into the full grid; masked rows become the
    // decoder's learnable [MASK] token via the blend in the backbone
    Var<S> dec_in_v = enc_tokens ? scatter_positions(g, enc_tokens, unmasked, B, N, w)
                                 : g.constant(Tensor<S>(Shape{B, N, w}));
    std::vector<uint8_t> dflags(static_cast<size_t>(B) * N);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < N; ++i) dflags[b * N + i] = is_masked[i];
    auto hs = bb->forward_latent_var(g, dec_in_v, dflags, cb, opt);
    return token_rows(g, hs.final_states, B);
  }

  // per-token diffusion head: eps_hat for masked tokens given conditions
  Var<S> mar_head_eps(Graph<S>& g, Var<S> conds, const Tensor<S>& noisy,
                      const std::vector<double>& t) const {
    const int t_feat = 32;
    Tensor<S> tf(Shape{static_cast<int>(t.size()), t_feat});
    for (size_t r = 0; r < t.size(); ++r)
      for (int i = 0; i < t_feat / 2; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / (t_feat / 2));
        tf[r * t_feat + i] = static_cast<S>(std::sin(t[r] * freq));
        tf[r * t_feat + t_feat / 2 + i] = static_cast<S>(std::cos(t[r] * freq));
      }
    Var<S> in = concat_last(g, {g.constant(noisy), conds, g.constant(tf)});
    Var<S> h = silu(g, dh_in.fwd(g, in));
    h = silu(g, dh_mid.fwd(g, h));
    return dh_out.fwd(g, h);
  }

  void save(const std::string& path, const nlohmann::json& extra = {}) const {
    nlohmann::json cfg_json = cfg.to_json();
    if (!extra.empty()) cfg_json["run"] = extra;
    save_checkpoint(path, cfg_json, params);
  }

  static Generator load(const std::string& path) {
    nlohmann::json cfg_json = load_checkpoint_config(path);
    Generator gen(GeneratorConfig::from_json(cfg_json));
    load_checkpoint(path, gen.params);
    return gen;
  }

 private:
  static Var<S> scatter_positions(Graph<S>& g, Var<S> x, const std::vector<int>& positions,
                                  int B, int N, int w) {
    // [B, Nu, w] -> [B, N, w] with zeros elsewhere
    const int nu = static_cast<int>(positions.size());
    Tensor<S> y(Shape{B, N, w});
    for (int b = 0; b < B; ++b)
      for (int u = 0; u < nu; ++u)
        for (int j = 0; j < w; ++j)
          y[(static_cast<int64_t>(b) * N + positions[u]) * w + j] =
              x->value[(static_cast<int64_t>(b) * nu + u) * w + j];
    Var<S> n = g.make(std::move(y), x->requires_grad);
    if (n->requires_grad)
      n->backprop = [n, x, positions, B, N, w, nu] {
        Tensor<S>& dx = gbuf(x);
        for (int b = 0; b < B; ++b)
          for (int u = 0; u < nu; ++u)
            for (int j = 0; j < w; ++j)
              dx[(static_cast<int64_t>(b) * nu + u) * w + j] +=
                  n->grad[(static_cast<int64_t>(b) * N + positions[u]) * w + j];
      };
    return n;
  }
};

}  // namespace cgl
