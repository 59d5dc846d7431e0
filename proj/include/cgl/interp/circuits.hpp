// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cgl/interp/heads.hpp"

namespace cgl {

// Fixed evaluation context for one composition's class score: reference
// inputs plus the frozen mask / timesteps / noise shared by every
// intervention run, so scores stay comparable.
template <class S>
struct ReferenceSet {
  FactorTuple composition;
  std::vector<AnalysisInput<S>> inputs;
  MaskSpec mask;         // masking families
  std::vector<int> ts;   // diffusion families: one t per reference
  Tensor<S> eps;         // diffusion families: fixed noise per reference
};

template <class S>
ReferenceSet<S> make_reference_set(const Generator<S>& gen, const Tokenizer<S>& tok,
                                   const SpaceFile& sf, const FactorTuple& comp, int n_ref,
                                   uint64_t seed) {
  ReferenceSet<S> out;
  out.composition = comp;
  const auto specs = cond_specs_from(sf);
  const bool quantized = regime_is_quantized(gen.cfg.regime);
  Rng rng = Rng(seed).stream("refs/" + tuple_str(comp));
  for (int i = 0; i < n_ref; ++i) {
    std::string shape;
    Realized real = draw_realization(sf.space, comp, sf.render, rng, &shape);
    ImageU8 img = render_from_realized(shape, real, sf.render);
    RealizedFactors rf{comp, real.hue, real.size_px / sf.render.canvas};
    Rng cond_rng(0);
    ConditionVector cv = apply_conditioning_regime(
        specs, rf, quantized ? CondRegime::kQuantized : CondRegime::kFull, 0.0, cond_rng);
    out.inputs.push_back(analysis_input_from_image(gen, tok, img, cv));
  }
  out.mask = sample_block_mask(gen.cfg.grid, gen.cfg.grid, 0.5, rng);
  const int N = gen.cfg.tokens();
  out.ts.resize(n_ref);
  for (int i = 0; i < n_ref; ++i) out.ts[i] = 1 + rng.randint(gen.sched.T);
  out.eps = randn<S>({n_ref, N, gen.cfg.latent_dim}, rng);
  return out;
}

// Class score under interventions. Masking families: mean masked-token
// log-likelihood of the reference grid under the fixed mask. Diffusion
// families: negative per-token noise-prediction loss at the fixed t set.
template <class S>
double class_score(const Generator<S>& gen, const ReferenceSet<S>& refs,
                   const InterventionSpec<S>* iv = nullptr) {
  const int B = static_cast<int>(refs.inputs.size());
  const int N = gen.cfg.tokens();
  const int d = gen.cfg.latent_dim;
  CondBatch cb;
  for (const auto& in : refs.inputs) cb.cond.push_back(in.cond);
  ForwardOptions<S> opt;
  opt.interventions = iv;
  Graph<S> g;

  switch (gen.cfg.family) {
    case Family::kMaskGit: {
      std::vector<int> codes;
      for (const auto& in : refs.inputs)
        codes.insert(codes.end(), in.codes.begin(), in.codes.end());
      std::vector<uint8_t> flags(static_cast<size_t>(B) * N, 0);
      for (int b = 0; b < B; ++b)
        for (int i : refs.mask.masked) flags[b * N + i] = 1;
      Var<S> logits = gen.maskgit_logits(g, codes, flags, cb, opt);
      double acc = 0.0;
      int count = 0;
      const int K = gen.cfg.K;
      for (int b = 0; b < B; ++b)
        for (int i : refs.mask.masked) {
          const S* row = logits->value.data() + (static_cast<int64_t>(b) * N + i) * K;
          S mx = row[0];
          for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
          double lse = 0.0;
          for (int k = 0; k < K; ++k) lse += std::exp(static_cast<double>(row[k] - mx));
          acc += static_cast<double>(row[codes[b * N + i]] - mx) - std::log(lse);
          ++count;
        }
      return acc / count;
    }
    case Family::kGivt: {
      Tensor<S> lat(Shape{B, N, d});
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i)
          lat[b * static_cast<int64_t>(N) * d + i] = refs.inputs[b].latents[i];
      std::vector<uint8_t> flags(static_cast<size_t>(B) * N, 0);
      for (int b = 0; b < B; ++b)
        for (int i : refs.mask.masked) flags[b * N + i] = 1;
      auto go = gen.givt_params(g, lat, flags, cb, opt);
      GMMHeadParams<S> hp;
      hp.m = gen.cfg.gmm_components;
      hp.d = d;
      const int m = hp.m;
      hp.weights = Tensor<S>(Shape{B * N, m});
      hp.means = go.mu->value.reshaped({B * N, m * d}).clone();
      hp.vars = Tensor<S>(Shape{B * N, m * d});
      for (int64_t r = 0; r < static_cast<int64_t>(B) * N; ++r) {
        std::vector<S> w(m);
        for (int j = 0; j < m; ++j) w[j] = go.wlogits->value[r * m + j];
        softmax_inplace(w.data(), m);
        for (int j = 0; j < m; ++j) hp.weights[r * m + j] = w[j];
        for (int j = 0; j < m * d; ++j)
          hp.vars[r * m * d + j] = static_cast<S>(
              gen.cfg.var_floor + std::exp(static_cast<double>(go.logvar->value[r * m * d + j])));
      }
      double acc = 0.0;
      int count = 0;
      for (int b = 0; b < B; ++b) {
        LatentGrid<S> tgt;
        tgt.h = gen.cfg.grid;
        tgt.w = gen.cfg.grid;
        tgt.d = d;
        tgt.data = Tensor<S>(Shape{N, d});
        for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i)
          tgt.data[i] = refs.inputs[b].latents[i];
        GMMHeadParams<S> hb;
        hb.m = m;
        hb.d = d;
        hb.weights = Tensor<S>(Shape{N, m});
        hb.means = Tensor<S>(Shape{N, m * d});
        hb.vars = Tensor<S>(Shape{N, m * d});
        for (int i = 0; i < N; ++i) {
          for (int j = 0; j < m; ++j) hb.weights[i * m + j] = hp.weights[(b * N + i) * m + j];
          for (int j = 0; j < m * d; ++j) {
            hb.means[i * m * d + j] = hp.means[(b * N + i) * static_cast<int64_t>(m) * d + j];
            hb.vars[i * m * d + j] = hp.vars[(b * N + i) * static_cast<int64_t>(m) * d + j];
          }
        }
        acc -= givt_loss(hb, tgt, refs.mask, gen.cfg.var_floor) * refs.mask.masked.size();
        count += static_cast<int>(refs.mask.masked.size());
      }
      return acc / count;
    }
    case Family::kDit: {
      Tensor<S> noisy(Shape{B, N, d});
      for (int b = 0; b < B; ++b) {
        const double a = std::sqrt(gen.sched.abar(refs.ts[b]));
        const double s = std::sqrt(1.0 - gen.sched.abar(refs.ts[b]));
        for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i) {
          const int64_t off = b * static_cast<int64_t>(N) * d + i;
          noisy[off] = static_cast<S>(a * refs.inputs[b].latents[i] + s * refs.eps[off]);
        }
      }
      CondBatch cbt = cb;
      for (int b = 0; b < B; ++b) cbt.t.push_back(refs.ts[b]);
      Var<S> eps_hat = gen.dit_eps(g, noisy, cbt, opt);
      double mse = 0.0;
      for (int64_t i = 0; i < eps_hat->value.size(); ++i) {
        const double diff = eps_hat->value[i] - refs.eps[i];
        mse += diff * diff;
      }
      return -mse / eps_hat->value.size();
    }
    case Family::kMar: {
      Tensor<S> lat(Shape{B, N, d});
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i)
          lat[b * static_cast<int64_t>(N) * d + i] = refs.inputs[b].latents[i];
      Var<S> conds = gen.mar_conditions(g, lat, refs.mask, cb, opt);
      std::vector<int> rows;
      for (int b = 0; b < B; ++b)
        for (int i : refs.mask.masked) rows.push_back(b * N + i);
      const int M = static_cast<int>(rows.size());
      Tensor<S> cond_rows(Shape{M, gen.cfg.width});
      for (int r = 0; r < M; ++r)
        for (int j = 0; j < gen.cfg.width; ++j)
          cond_rows[r * gen.cfg.width + j] =
              conds->value[static_cast<int64_t>(rows[r]) * gen.cfg.width + j];
      Tensor<S> noisy(Shape{M, d});
      std::vector<double> tv(M);
      Tensor<S> teps(Shape{M, d});
      for (int r = 0; r < M; ++r) {
        const int b = rows[r] / N;
        const int t = refs.ts[b];
        tv[r] = t;
        const double a = std::sqrt(gen.sched.abar(t));
        const double s = std::sqrt(1.0 - gen.sched.abar(t));
        for (int k = 0; k < d; ++k) {
          const S e = refs.eps[static_cast<int64_t>(rows[r]) * d + k];
          teps[r * d + k] = e;
          noisy[r * d + k] = static_cast<S>(a * lat[static_cast<int64_t>(rows[r]) * d + k] + s * e);
        }
      }
      Graph<S> g2;
      Var<S> eps_hat = gen.mar_head_eps(g2, g2.constant(cond_rows), noisy, tv);
      double mse = 0.0;
      for (int64_t i = 0; i < eps_hat->value.size(); ++i) {
        const double diff = eps_hat->value[i] - teps[i];
        mse += diff * diff;
      }
      return -mse / eps_hat->value.size();
    }
  }
  throw std::runtime_error("class_score: unexpected family");
}

// Impact(a_{l,j}) = |S_C - S_C with neuron (l,j) zeroed|
template <class S>
double neuron_impact(const Generator<S>& gen, const ReferenceSet<S>& refs, int layer, int neuron,
                     double baseline) {
  InterventionSpec<S> iv;
  iv.patches.push_back({layer, neuron, {}});
  return std::abs(baseline - class_score(gen, refs, &iv));
}

struct CircuitNode {
  int layer = 1;  // 1-indexed
  int neuron = 0;
  double impact = 0.0;
  bool operator<(const CircuitNode& o) const {
    return layer != o.layer ? layer < o.layer : neuron < o.neuron;
  }
};

struct CircuitEdge {
  int layer = 1;  // source layer; target layer is layer+1
  int src = 0;
  int dst = 0;
  double weight = 0.0;
};

struct CircuitGraph {
  std::string composition;
  int layers = 0;
  std::vector<CircuitNode> nodes;
  std::vector<CircuitEdge> edges;

  std::set<std::pair<int, int>> node_set() const {
    std::set<std::pair<int, int>> out;
    for (const auto& n : nodes) out.insert({n.layer, n.neuron});
    return out;
  }
};

// all-neuron zero-ablation impacts: impacts[(l-1)*mlp + j]
template <class S>
std::vector<double> neuron_impacts(const Generator<S>& gen, const ReferenceSet<S>& refs) {
  const int L = gen.bb->cfg.layers;
  const int mlp = gen.bb->cfg.mlp();
  const double base = class_score(gen, refs);
  std::vector<double> impacts(static_cast<size_t>(L) * mlp, 0.0);
  for (int l = 1; l <= L; ++l)
    for (int j = 0; j < mlp; ++j)
      impacts[(l - 1) * static_cast<size_t>(mlp) + j] = neuron_impact(gen, refs, l, j, base);
  return impacts;
}

// gradient-of-target-preactivation x source-activation, reference-averaged
template <class S>
std::vector<std::vector<double>> edge_attributions(const Generator<S>& gen,
                                                   const ReferenceSet<S>& refs, int src_layer,
                                                   const std::vector<int>& target_neurons) {
  const int B = static_cast<int>(refs.inputs.size());
  const int N = gen.cfg.tokens();
  const int mlp = gen.bb->cfg.mlp();
  CondBatch cb;
  for (const auto& in : refs.inputs) cb.cond.push_back(in.cond);

  std::vector<std::vector<double>> out;
  for (int tj : target_neurons) {
    Graph<S> g;
    ForwardOptions<S> opt;
    opt.record_mlp = true;
    HiddenStates<S> hs;
    if (gen.cfg.family == Family::kMaskGit) {
      TokenInput<S> tin;
      tin.batch = B;
      for (const auto& in : refs.inputs)
        tin.codes.insert(tin.codes.end(), in.codes.begin(), in.codes.end());
      std::vector<uint8_t> flags(static_cast<size_t>(B) * N, 0);
      for (int b = 0; b < B; ++b)
        for (int i : refs.mask.masked) flags[b * N + i] = 1;
      tin.masked = flags;
      hs = gen.bb->forward(g, tin, cb, opt);
    } else {
      TokenInput<S> tin;
      tin.batch = B;
      tin.latents = Tensor<S>(Shape{B, N, gen.cfg.latent_dim});
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < static_cast<int64_t>(N) * gen.cfg.latent_dim; ++i)
          tin.latents[b * static_cast<int64_t>(N) * gen.cfg.latent_dim + i] =
              refs.inputs[b].latents[i];
      if (gen.cfg.family == Family::kDit) cb.t.assign(B, 1.0);
      hs = gen.bb->forward(g, tin, cb, opt);
    }
    // scalar: mean of target neuron's preactivation in block src_layer+1
    Var<S> pre = hs.mlp_pre[src_layer];  // 0-indexed vector; block src_layer+1
    const int64_t rows = pre->value.rows();
    Var<S> col = slice_last(g, reshape(g, pre, {static_cast<int>(rows), mlp}), tj, 1);
    Var<S> target = mean_all(g, col);
    gen.params.zero_grad();
    g.backward(target);
    Var<S> act = hs.mlp_acts[src_layer - 1];
    std::vector<double> attr(mlp, 0.0);
    if (act->grad.defined())
      for (int64_t r = 0; r < act->value.rows(); ++r)
        for (int j = 0; j < mlp; ++j)
          attr[j] += static_cast<double>(act->grad[r * mlp + j]) * act->value[r * mlp + j];
    out.push_back(std::move(attr));
  }
  gen.params.zero_grad();
  return out;
}

// top-q nodes per layer by impact; edges kept where the source is selected
// and its |attribution| ranks within the target's top-q attribution mass
template <class S>
CircuitGraph extract_circuit(const Generator<S>& gen, const ReferenceSet<S>& refs,
                             double top_fraction) {
  const int L = gen.bb->cfg.layers;
  const int mlp = gen.bb->cfg.mlp();
  CircuitGraph out;
  out.composition = tuple_str(refs.composition);
  out.layers = L;
  if (top_fraction <= 0.0) return out;
  const int keep = std::min(mlp, std::max(1, static_cast<int>(std::floor(mlp * top_fraction))));
  const int keep_final = top_fraction >= 1.0 ? mlp : keep;

  std::vector<double> impacts = neuron_impacts(gen, refs);
  std::vector<std::vector<int>> selected(L + 1);  // 1-indexed layers
  for (int l = 1; l <= L; ++l) {
    std::vector<int> idx(mlp);
    for (int j = 0; j < mlp; ++j) idx[j] = j;
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return impacts[(l - 1) * static_cast<size_t>(mlp) + a] >
             impacts[(l - 1) * static_cast<size_t>(mlp) + b];
    });
    idx.resize(keep_final);
    std::sort(idx.begin(), idx.end());
    selected[l] = idx;
    for (int j : idx)
      out.nodes.push_back({l, j, impacts[(l - 1) * static_cast<size_t>(mlp) + j]});
  }

  for (int l = 1; l < L; ++l) {
    auto attrs = edge_attributions(gen, refs, l, selected[l + 1]);
    for (size_t ti = 0; ti < selected[l + 1].size(); ++ti) {
      // rank source attributions for this target
      std::vector<int> order(mlp);
      for (int j = 0; j < mlp; ++j) order[j] = j;
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(attrs[ti][a]) > std::abs(attrs[ti][b]);
      });
      std::set<int> top_src(order.begin(), order.begin() + keep_final);
      for (int j : selected[l])
        if (top_src.count(j))
          out.edges.push_back({l, j, selected[l + 1][ti], attrs[ti][j]});
    }
  }
  return out;
}

struct JaccardScores {
  double overall = 0.0;
  std::vector<double> per_layer;
};

// |A intersect B| / |A union B| over circuit node sets
inline JaccardScores jaccard(const CircuitGraph& a, const CircuitGraph& b) {
  if (a.layers != b.layers) throw std::runtime_error("jaccard: circuits from different configs");
  JaccardScores out;
  const auto sa = a.node_set();
  const auto sb = b.node_set();
  std::vector<int> inter(a.layers + 1, 0), uni(a.layers + 1, 0);
  int inter_all = 0, uni_all = 0;
  for (const auto& n : sa) {
    ++uni[n.first];
    ++uni_all;
    if (sb.count(n)) {
      ++inter[n.first];
      ++inter_all;
    }
  }
  for (const auto& n : sb)
    if (!sa.count(n)) {
      ++uni[n.first];
      ++uni_all;
    }
  out.overall = uni_all == 0 ? 0.0 : static_cast<double>(inter_all) / uni_all;
  for (int l = 1; l <= a.layers; ++l)
    out.per_layer.push_back(uni[l] == 0 ? 0.0 : static_cast<double>(inter[l]) / uni[l]);
  return out;
}

// node/edge list text export
inline void save_circuit(const CircuitGraph& c, const std::string& nodes_path,
                         const std::string& edges_path) {
  std::ofstream ns(nodes_path);
  ns << "layer\tneuron\timpact\n";
  for (const auto& n : c.nodes) ns << n.layer << "\t" << n.neuron << "\t" << n.impact << "\n";
  std::ofstream es(edges_path);
  es << "src_layer\tsrc_neuron\tdst_layer\tdst_neuron\tweight\n";
  for (const auto& e : c.edges)
    es << e.layer << "\t" << e.src << "\t" << e.layer + 1 << "\t" << e.dst << "\t" << e.weight
       << "\n";
}

}  // namespace cgl
