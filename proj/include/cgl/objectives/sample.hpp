// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <vector>

#include "cgl/objectives/generator.hpp"

namespace cgl {

namespace detail {

inline void check_finite(const char* who, double v) {
  if (!std::isfinite(v)) throw std::runtime_error(std::string(who) + ": non-finite value");
}

// positions to newly commit this step so the masked count follows the
// cosine schedule
inline int commit_quota(int tokens, int committed, int step, int total_steps) {
  const int target_masked = cosine_masked_count(tokens, step, total_steps);
  return std::max(0, (tokens - target_masked) - committed);
}

}  // namespace detail

// draw one value from a per-token GMM; confidence is the mixture log-density
// at the drawn value
template <class S>
struct GmmDraw {
  std::vector<S> value;
  double log_density = 0.0;
};

template <class S>
GmmDraw<S> gmm_draw(const GMMHeadParams<S>& params, int token, Rng& rng, double temperature,
                    bool greedy) {
  const int m = params.m, d = params.d;
  GmmDraw<S> out;
  out.value.resize(d);
  int comp = 0;
  if (greedy) {
    for (int j = 1; j < m; ++j)
      if (params.weights[token * m + j] > params.weights[token * m + comp]) comp = j;
  } else {
    double u = rng.uniform();
    double acc = 0.0;
    comp = m - 1;
    for (int j = 0; j < m; ++j) {
      acc += params.weights[token * m + j];
      if (u < acc) {
        comp = j;
        break;
      }
    }
  }
  for (int k = 0; k < d; ++k) {
    const int64_t off = (static_cast<int64_t>(token) * m + comp) * d + k;
    const double sigma = std::sqrt(static_cast<double>(params.vars[off]));
    const double z = greedy ? 0.0 : rng.normal() * temperature;
    out.value[k] = static_cast<S>(params.means[off] + sigma * z);
  }
  // mixture log-density at the drawn value
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  std::vector<double> t(m);
  for (int j = 0; j < m; ++j) {
    double logn = 0.0;
    for (int k = 0; k < d; ++k) {
      const int64_t off = (static_cast<int64_t>(token) * m + j) * d + k;
      const double var = params.vars[off];
      const double diff = static_cast<double>(out.value[k]) - params.means[off];
      logn -= 0.5 * (diff * diff / var + std::log(var) + kLog2Pi);
    }
    t[j] = std::log(std::max(1e-300, static_cast<double>(params.weights[token * m + j]))) + logn;
  }
  double tmax = *std::max_element(t.begin(), t.end());
  double lse = 0.0;
  for (double v : t) lse += std::exp(v - tmax);
  out.log_density = tmax + std::log(lse);
  return out;
}

// Iterative confidence decoding: everything starts masked; each step commits
// the highest-confidence fraction per the cosine schedule, and committed
// tokens never change.
template <class S>
std::vector<TokenGrid> maskgit_sample(const Generator<S>& gen, const CondBatch& cond, int steps,
                                      double temperature, bool greedy, Rng& rng) {
  if (steps < 1) throw std::runtime_error("maskgit_sample: steps must be >= 1");
  const int B = static_cast<int>(cond.cond.size());
  const int N = gen.cfg.tokens();
  const int K = gen.cfg.K;
  std::vector<int> codes(static_cast<size_t>(B) * N, 0);
  std::vector<uint8_t> committed(static_cast<size_t>(B) * N, 0);
  std::vector<int> committed_count(B, 0);

  for (int s = 1; s <= steps; ++s) {
    std::vector<uint8_t> flags(static_cast<size_t>(B) * N);
    for (int64_t i = 0; i < static_cast<int64_t>(B) * N; ++i) flags[i] = committed[i] ? 0 : 1;
    Graph<S> g;
    Var<S> logits = gen.maskgit_logits(g, codes, flags, cond);  // [B*N, K]
    for (int b = 0; b < B; ++b) {
      std::vector<std::pair<double, int>> picks;  // (confidence, position)
      std::vector<int> chosen(N, -1);
      for (int i = 0; i < N; ++i) {
        if (committed[b * N + i]) continue;
        std::vector<S> probs(K);
        for (int k = 0; k < K; ++k) {
          double v = logits->value[(static_cast<int64_t>(b) * N + i) * K + k];
          detail::check_finite("maskgit_sample", v);
          probs[k] = static_cast<S>(v / std::max(1e-9, temperature));
        }
        softmax_inplace(probs.data(), K);
        int tok;
        if (greedy) {
          tok = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        } else {
          double u = rng.uniform(), acc = 0.0;
          tok = K - 1;
          for (int k = 0; k < K; ++k) {
            acc += probs[k];
            if (u < acc) {
              tok = k;
              break;
            }
          }
        }
        chosen[i] = tok;
        picks.push_back({static_cast<double>(probs[tok]), i});
      }
      int quota = detail::commit_quota(N, committed_count[b], s, steps);
      std::sort(picks.begin(), picks.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      for (int q = 0; q < quota && q < static_cast<int>(picks.size()); ++q) {
        const int pos = picks[q].second;
        codes[b * N + pos] = chosen[pos];
        committed[b * N + pos] = 1;
        ++committed_count[b];
      }
    }
  }
  std::vector<TokenGrid> out(B);
  for (int b = 0; b < B; ++b) {
    if (committed_count[b] != N)
      throw std::runtime_error("maskgit_sample: not all tokens committed");
    out[b].h = out[b].w = gen.cfg.grid;
    out[b].K = K;
    out[b].codes.assign(codes.begin() + static_cast<int64_t>(b) * N,
                        codes.begin() + static_cast<int64_t>(b + 1) * N);
  }
  return out;
}

// Same loop with a GMM head; per commit, draw component ~ weights, then a
// Gaussian value; confidence is the mixture density at the drawn value.
template <class S>
Tensor<S> givt_sample(const Generator<S>& gen, const CondBatch& cond, int steps,
                      double temperature, bool greedy, Rng& rng) {
  if (steps < 1) throw std::runtime_error("givt_sample: steps must be >= 1");
  const int B = static_cast<int>(cond.cond.size());
  const int N = gen.cfg.tokens();
  const int d = gen.cfg.latent_dim;
  const int m = gen.cfg.gmm_components;
  Tensor<S> latents(Shape{B, N, d});
  std::vector<uint8_t> committed(static_cast<size_t>(B) * N, 0);
  std::vector<int> committed_count(B, 0);

  for (int s = 1; s <= steps; ++s) {
    std::vector<uint8_t> flags(static_cast<size_t>(B) * N);
    for (int64_t i = 0; i < static_cast<int64_t>(B) * N; ++i) flags[i] = committed[i] ? 0 : 1;
    Graph<S> g;
    auto go = gen.givt_params(g, latents, flags, cond);
    // assemble plain head params for the whole batch
    GMMHeadParams<S> hp;
    hp.m = m;
    hp.d = d;
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
    for (int b = 0; b < B; ++b) {
      std::vector<std::pair<double, int>> picks;
      std::vector<std::vector<S>> drawn(N);
      for (int i = 0; i < N; ++i) {
        if (committed[b * N + i]) continue;
        auto dr = gmm_draw(hp, b * N + i, rng, temperature, greedy);
        detail::check_finite("givt_sample", dr.log_density);
        drawn[i] = dr.value;
        picks.push_back({dr.log_density, i});
      }
      int quota = detail::commit_quota(N, committed_count[b], s, steps);
      std::sort(picks.begin(), picks.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      for (int q = 0; q < quota && q < static_cast<int>(picks.size()); ++q) {
        const int pos = picks[q].second;
        for (int k = 0; k < d; ++k) latents[(static_cast<int64_t>(b) * N + pos) * d + k] = drawn[pos][k];
        committed[b * N + pos] = 1;
        ++committed_count[b];
      }
    }
  }
  return latents;
}

// ancestral DDPM sampling from pure noise; deterministic=true drops the
// per-step noise (sigma = 0)
template <class S>
Tensor<S> dit_sample(const Generator<S>& gen, const CondBatch& cond, Rng& rng,
                     bool deterministic = false) {
  const int B = static_cast<int>(cond.cond.size());
  const int N = gen.cfg.tokens();
  const int d = gen.cfg.latent_dim;
  Tensor<S> x = randn<S>({B, N, d}, rng);
  for (int t = gen.sched.T; t >= 1; --t) {
    CondBatch cb = cond;
    cb.t.assign(B, static_cast<double>(t));
    Graph<S> g;
    Var<S> eps_hat = gen.dit_eps(g, x, cb);
    Tensor<S> eh = eps_hat->value.reshaped(x.shape);
    x = diffusion_reverse_step(x, eh, t, gen.sched, &rng, deterministic ? 0.0 : 1.0);
    if (!x.all_finite()) throw std::runtime_error("dit_sample: non-finite latent");
  }
  return x;
}

// per-token reverse diffusion for a set of rows under the MAR head
template <class S>
Tensor<S> mar_reverse_tokens(const Generator<S>& gen, const Tensor<S>& cond_rows, Rng& rng,
                             bool deterministic) {
  const int M = cond_rows.shape[0];
  const int d = gen.cfg.latent_dim;
  Tensor<S> x = randn<S>({M, d}, rng);
  for (int t = gen.sched.T; t >= 1; --t) {
    Graph<S> g;
    std::vector<double> tv(M, static_cast<double>(t));
    Var<S> eps_hat = gen.mar_head_eps(g, g.constant(cond_rows), x, tv);
    x = diffusion_reverse_step(x, eps_hat->value, t, gen.sched, &rng, deterministic ? 0.0 : 1.0);
    if (!x.all_finite()) throw std::runtime_error("mar_sample: non-finite latent");
  }
  return x;
}

// masked iterative generation: positions are committed in cosine-schedule
// chunks in a random order shared across the batch; each committed token is
// generated by its own reverse diffusion chain
template <class S>
Tensor<S> mar_sample(const Generator<S>& gen, const CondBatch& cond, int steps, Rng& rng,
                     bool deterministic = false) {
  if (steps < 1) throw std::runtime_error("mar_sample: steps must be >= 1");
  const int B = static_cast<int>(cond.cond.size());
  const int N = gen.cfg.tokens();
  const int d = gen.cfg.latent_dim;
  Tensor<S> latents(Shape{B, N, d});
  std::vector<int> order(N);
  for (int i = 0; i < N; ++i) order[i] = i;
  for (int i = N - 1; i > 0; --i) std::swap(order[i], order[rng.randint(i + 1)]);

  int committed = 0;
  for (int s = 1; s <= steps && committed < N; ++s) {
    const int quota = detail::commit_quota(N, committed, s, steps);
    if (quota == 0) continue;
    std::vector<int> chunk(order.begin() + committed, order.begin() + committed + quota);
    MaskSpec mask;
    mask.grid_h = mask.grid_w = gen.cfg.grid;
    for (int i = 0; i < N; ++i) {
      bool done = false;
      for (int j = 0; j < committed; ++j) done = done || order[j] == i;
      if (!done) mask.masked.push_back(i);
    }
    Graph<S> g;
    Var<S> conds = gen.mar_conditions(g, latents, mask, cond);  // [B*N, w]
    std::vector<int> rows;
    for (int b = 0; b < B; ++b)
      for (int i : chunk) rows.push_back(b * N + i);
    Tensor<S> cond_rows(Shape{static_cast<int>(rows.size()), gen.cfg.width});
    for (size_t r = 0; r < rows.size(); ++r)
      for (int j = 0; j < gen.cfg.width; ++j)
        cond_rows[r * gen.cfg.width + j] = conds->value[static_cast<int64_t>(rows[r]) * gen.cfg.width + j];
    Tensor<S> vals = mar_reverse_tokens(gen, cond_rows, rng, deterministic);
    for (size_t r = 0; r < rows.size(); ++r)
      for (int k = 0; k < d; ++k) latents[static_cast<int64_t>(rows[r]) * d + k] = vals[r * d + k];
    committed += quota;
  }
  if (committed != N) throw std::runtime_error("mar_sample: not all tokens committed");
  return latents;
}

// Sample from any family and decode to images [B,3,H,W] via the tokenizer.
template <class S>
Tensor<S> generate_images(const Generator<S>& gen, const Tokenizer<S>& tok,
                          const CondBatch& cond, Rng& rng, bool greedy = false) {
  const int B = static_cast<int>(cond.cond.size());
  if (gen.cfg.family == Family::kMaskGit) {
    auto grids = maskgit_sample(gen, cond, gen.cfg.sample_steps, gen.cfg.temperature, greedy, rng);
    Tensor<S> lat(Shape{B, gen.cfg.tokens(), gen.cfg.latent_dim});
    const Tensor<S> cb = tok.codebook_values();
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < gen.cfg.tokens(); ++i)
        for (int k = 0; k < gen.cfg.latent_dim; ++k)
          lat[(static_cast<int64_t>(b) * gen.cfg.tokens() + i) * gen.cfg.latent_dim + k] =
              cb[grids[b].codes[i] * gen.cfg.latent_dim + k];
    return tok.decode_batch(lat);
  }
  Tensor<S> lat;
  switch (gen.cfg.family) {
    case Family::kGivt:
      lat = givt_sample(gen, cond, gen.cfg.sample_steps, gen.cfg.temperature, greedy, rng);
      break;
    case Family::kMar:
      lat = mar_sample(gen, cond, gen.cfg.sample_steps, rng, greedy);
      break;
    case Family::kDit:
      lat = dit_sample(gen, cond, rng, greedy);
      break;
    default:
      throw std::runtime_error("generate_images: unexpected family");
  }
  if (gen.cfg.latent_scale != 1.0)
    for (int64_t i = 0; i < lat.size(); ++i)
      lat[i] = static_cast<S>(lat[i] / gen.cfg.latent_scale);
  return tok.decode_batch(lat);
}

}  // namespace cgl
