// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cgl/core/nn.hpp"
#include "cgl/core/serialize.hpp"

namespace cgl {

enum class TokenizerKind { kVae, kVqvae, kPixel };

inline std::string to_string(TokenizerKind k) {
  switch (k) {
    case TokenizerKind::kVae: return "vae";
    case TokenizerKind::kVqvae: return "vqvae";
    case TokenizerKind::kPixel: return "pixel";
  }
  return "?";
}

inline TokenizerKind tokenizer_kind_from(const std::string& s) {
  if (s == "vae") return TokenizerKind::kVae;
  if (s == "vqvae") return TokenizerKind::kVqvae;
  if (s == "pixel") return TokenizerKind::kPixel;
  throw std::runtime_error("unknown tokenizer kind '" + s + "'");
}

struct TokenizerConfig {
  TokenizerKind kind = TokenizerKind::kVqvae;
  int image_size = 32;
  int downsample = 8;     // power of two; grid = image_size / downsample
  int d = 16;             // latent dim per cell (pixel mode: 3*downsample^2)
  int K = 256;            // codebook size (vqvae only)
  double beta = 0.25;     // commitment weight
  double kl_weight = 1e-4;
  int channels = 32;      // base conv width
  long steps = 3000;
  int batch = 64;
  double lr = 1e-3;
  uint64_t seed = 0;

  int grid() const { return image_size / downsample; }
  int tokens() const { return grid() * grid(); }
  int latent_dim() const {
    return kind == TokenizerKind::kPixel ? 3 * downsample * downsample : d;
  }

  void validate() const {
    if (downsample < 1 || (downsample & (downsample - 1)) != 0)
      throw std::runtime_error("tokenizer: downsample must be a power of 2");
    if (image_size % downsample != 0)
      throw std::runtime_error("tokenizer: image size not divisible by downsample");
    if (kind == TokenizerKind::kVqvae && K < 1)
      throw std::runtime_error("tokenizer: K must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)}, {"image_size", image_size}, {"downsample", downsample},
            {"d", d},                  {"K", K},                   {"beta", beta},
            {"kl_weight", kl_weight},  {"channels", channels},     {"steps", steps},
            {"batch", batch},          {"lr", lr},                 {"seed", seed}};
  }
  static TokenizerConfig from_json(const nlohmann::json& j) {
    TokenizerConfig c;
    c.kind = tokenizer_kind_from(j.at("kind").get<std::string>());
    c.image_size = j.value("image_size", 32);
    c.downsample = j.value("downsample", 8);
    c.d = j.value("d", 16);
    c.K = j.value("K", 256);
    c.beta = j.value("beta", 0.25);
    c.kl_weight = j.value("kl_weight", 1e-4);
    c.channels = j.value("channels", 32);
    c.steps = j.value("steps", 3000L);
    c.batch = j.value("batch", 64);
    c.lr = j.value("lr", 1e-3);
    c.seed = j.value("seed", uint64_t{0});
    return c;
  }
};

struct TokenGrid {
  int h = 0, w = 0, K = 0;
  std::vector<int> codes;  // row-major, h*w entries
  int tokens() const { return h * w; }
};

enum class LatentTag { kVaeSample, kVaeMean, kPreQuantization, kPixel, kQuantized };

template <class S>
struct LatentGrid {
  int h = 0, w = 0, d = 0;
  Tensor<S> data;  // [h*w, d]
  LatentTag tag = LatentTag::kPreQuantization;
  int tokens() const { return h * w; }
};

// ---- layout helpers ----

// [B, C, G, G] -> [B, G*G, C]
template <class S>
Tensor<S> chw_to_tokens(const Tensor<S>& x) {
  const int B = x.shape[0], C = x.shape[1], G = x.shape[2];
  Tensor<S> out(Shape{B, G * x.shape[3], C});
  const int64_t hw = static_cast<int64_t>(G) * x.shape[3];
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int64_t p = 0; p < hw; ++p)
        out[(b * hw + p) * C + c] = x[(static_cast<int64_t>(b) * C + c) * hw + p];
  return out;
}

// [B, N, C] -> [B, C, G, G] with N = G*G
template <class S>
Tensor<S> tokens_to_chw(const Tensor<S>& x, int G) {
  const int B = x.shape[0], N = x.shape[1], C = x.shape[2];
  Tensor<S> out(Shape{B, C, G, N / G});
  for (int b = 0; b < B; ++b)
    for (int64_t p = 0; p < N; ++p)
      for (int c = 0; c < C; ++c)
        out[(static_cast<int64_t>(b) * C + c) * N + p] = x[(b * static_cast<int64_t>(N) + p) * C + c];
  return out;
}

// autograd variants (pure permutations)
template <class S>
Var<S> chw_to_tokens_v(Graph<S>& g, Var<S> x) {
  Tensor<S> y = chw_to_tokens(x->value);
  Var<S> n = g.make(std::move(y), x->requires_grad);
  if (n->requires_grad) {
    const int B = x->value.shape[0], C = x->value.shape[1];
    const int64_t hw = n->value.shape[1];
    n->backprop = [n, x, B, C, hw] {
      Tensor<S>& dx = gbuf(x);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int64_t p = 0; p < hw; ++p)
            dx[(static_cast<int64_t>(b) * C + c) * hw + p] += n->grad[(b * hw + p) * C + c];
    };
  }
  return n;
}

template <class S>
Var<S> tokens_to_chw_v(Graph<S>& g, Var<S> x, int G) {
  Tensor<S> y = tokens_to_chw(x->value, G);
  Var<S> n = g.make(std::move(y), x->requires_grad);
  if (n->requires_grad) {
    const int B = x->value.shape[0], N = x->value.shape[1], C = x->value.shape[2];
    n->backprop = [n, x, B, N, C] {
      Tensor<S>& dx = gbuf(x);
      for (int b = 0; b < B; ++b)
        for (int64_t p = 0; p < N; ++p)
          for (int c = 0; c < C; ++c)
            dx[(b * static_cast<int64_t>(N) + p) * C + c] +=
                n->grad[(static_cast<int64_t>(b) * C + c) * N + p];
    };
  }
  return n;
}

// ---- quantization ----

template <class S>
struct QuantizeResult {
  TokenGrid tokens;
  LatentGrid<S> quantized;
  double codebook_loss = 0.0;    // mean ||sg(z_e) - e||^2
  double commitment_loss = 0.0;  // mean ||z_e - sg(e)||^2
};

// Exhaustive nearest neighbor in double precision; ties break to the lowest
// index. codebook [K, d], latent [N, d].
template <class S>
QuantizeResult<S> quantize(const LatentGrid<S>& latent, const Tensor<S>& codebook) {
  const int K = codebook.shape[0];
  const int d = codebook.shape[1];
  if (latent.d != d) throw std::runtime_error("quantize: latent dim mismatch");
  QuantizeResult<S> out;
  out.tokens.h = latent.h;
  out.tokens.w = latent.w;
  out.tokens.K = K;
  out.quantized = latent;
  out.quantized.data = latent.data.clone();
  out.quantized.tag = LatentTag::kQuantized;
  const int N = latent.tokens();
  out.tokens.codes.resize(N);
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < K; ++k) {
      double dist = 0.0;
      for (int j = 0; j < d; ++j) {
        const double diff = static_cast<double>(latent.data[i * d + j]) -
                            static_cast<double>(codebook[k * d + j]);
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    out.tokens.codes[i] = best;
    total += best_d;
    for (int j = 0; j < d; ++j) out.quantized.data[i * d + j] = codebook[best * d + j];
  }
  out.codebook_loss = total / (static_cast<double>(N) * d);
  out.commitment_loss = out.codebook_loss;  // same squared distance, different gradient target
  return out;
}

// ---- networks ----

template <class S>
struct ConvEncoder {
  std::vector<Conv2d<S>> downs;   // stride-2 convs
  std::vector<Conv2d<S>> mids;    // stride-1 convs after each downsample
  Conv2d<S> head;                 // 1x1 to out_dim

  ConvEncoder() = default;
  ConvEncoder(ParamStore<S>& ps, const Rng& rng, const std::string& prefix, int levels,
              int base_ch, int out_dim) {
    int ci = 3;
    for (int l = 0; l < levels; ++l) {
      const int co = base_ch << std::min(l, 2);
      downs.emplace_back(ps, rng, prefix + ".down" + std::to_string(l), ci, co, 3, 2, 1);
      mids.emplace_back(ps, rng, prefix + ".mid" + std::to_string(l), co, co, 3, 1, 1);
      ci = co;
    }
    head = Conv2d<S>(ps, rng, prefix + ".head", ci, out_dim, 1, 1, 0);
  }

  Var<S> fwd(Graph<S>& g, Var<S> x) const {
    for (size_t l = 0; l < downs.size(); ++l) {
      x = gelu(g, downs[l].fwd(g, x));
      x = gelu(g, mids[l].fwd(g, x));
    }
    return head.fwd(g, x);
  }
};

template <class S>
struct ConvDecoder {
  Conv2d<S> head;
  std::vector<Conv2d<S>> mids;
  std::vector<Conv2d<S>> ups;  // conv after nearest-neighbor upsample
  Conv2d<S> tail;

  ConvDecoder() = default;
  ConvDecoder(ParamStore<S>& ps, const Rng& rng, const std::string& prefix, int levels,
              int base_ch, int in_dim) {
    const int top_ch = base_ch << std::min(levels - 1, 2);
    head = Conv2d<S>(ps, rng, prefix + ".head", in_dim, top_ch, 1, 1, 0);
    int ci = top_ch;
    for (int l = levels - 1; l >= 0; --l) {
      const int co = base_ch << std::min(l, 2);
      mids.emplace_back(ps, rng, prefix + ".mid" + std::to_string(l), ci, co, 3, 1, 1);
      ups.emplace_back(ps, rng, prefix + ".up" + std::to_string(l), co, co, 3, 1, 1);
      ci = co;
    }
    tail = Conv2d<S>(ps, rng, prefix + ".tail", ci, 3, 3, 1, 1);
  }

  Var<S> fwd(Graph<S>& g, Var<S> z) const {
    Var<S> x = gelu(g, head.fwd(g, z));
    for (size_t l = 0; l < mids.size(); ++l) {
      x = gelu(g, mids[l].fwd(g, x));
      x = upsample2x(g, x);
      x = gelu(g, ups[l].fwd(g, x));
    }
    return tail.fwd(g, x);
  }
};

// First-stage autoencoder with a frozen-checkpoint inference surface.
template <class S>
class Tokenizer {
 public:
  TokenizerConfig cfg;
  ParamStore<S> params;
  ConvEncoder<S> encoder;
  ConvDecoder<S> decoder;
  Param<S>* codebook = nullptr;  // [K, d], vqvae only

  explicit Tokenizer(TokenizerConfig c) : cfg(c) {
    cfg.validate();
    const Rng rng(cfg.seed);
    const int levels = static_cast<int>(std::round(std::log2(cfg.downsample)));
    if (cfg.kind != TokenizerKind::kPixel) {
      const int enc_out = cfg.kind == TokenizerKind::kVae ? 2 * cfg.d : cfg.d;
      encoder = ConvEncoder<S>(params, rng, "enc", levels, cfg.channels, enc_out);
      decoder = ConvDecoder<S>(params, rng, "dec", levels, cfg.channels, cfg.d);
    }
    if (cfg.kind == TokenizerKind::kVqvae)
      codebook = params.create(
          "codebook", init::normal_<S>(Shape{cfg.K, cfg.d}, rng, "codebook",
                                       1.0 / std::sqrt(static_cast<double>(cfg.d))));
  }

  int grid() const { return cfg.grid(); }

  // ---- batched encode (graph-aware for training) ----

  struct EncodeOut {
    Var<S> tokens = nullptr;  // [B, N, d] continuous latents
    Var<S> mu = nullptr;      // vae only
    Var<S> logvar = nullptr;  // vae only
  };

  // deterministic=false draws the VAE posterior sample using rng
  EncodeOut encode_graph(Graph<S>& g, const Tensor<S>& images, bool deterministic,
                         Rng* rng) const {
    if (images.shape[2] != cfg.image_size || images.shape[3] != cfg.image_size)
      throw std::runtime_error("tokenizer: image resolution mismatch, expected " +
                               std::to_string(cfg.image_size));
    EncodeOut out;
    const int B = images.shape[0];
    const int N = cfg.tokens();
    if (cfg.kind == TokenizerKind::kPixel) {
      out.tokens = g.constant(patchify(images));
      return out;
    }
    Var<S> feat = encoder.fwd(g, g.constant(images));  // [B, enc_out, G, G]
    Var<S> tok = chw_to_tokens_v(g, feat);             // [B, N, enc_out]
    if (cfg.kind == TokenizerKind::kVae) {
      out.mu = slice_last(g, tok, 0, cfg.d);
      out.logvar = slice_last(g, tok, cfg.d, cfg.d);
      if (deterministic) {
        out.tokens = out.mu;
      } else {
        if (!rng) throw std::runtime_error("tokenizer: sampling requires rng");
        Tensor<S> eps = randn<S>(Shape{B, N, cfg.d}, *rng);
        Var<S> std_v = vexp(g, scale(g, out.logvar, 0.5));
        out.tokens = add(g, out.mu, mul(g, std_v, g.constant(eps)));
      }
    } else {
      out.tokens = tok;  // pre-quantization encoder output
    }
    return out;
  }

  // ---- frozen-surface helpers (no grad) ----

  LatentGrid<S> encode_continuous(const Tensor<S>& image, bool deterministic = true,
                                  Rng* rng = nullptr) const {
    Tensor<S> batch = image.reshaped({1, image.shape[0], image.shape[1], image.shape[2]});
    Graph<S> g;
    EncodeOut eo = encode_graph(g, batch, deterministic, rng);
    LatentGrid<S> out;
    out.h = out.w = grid();
    out.d = cfg.latent_dim();
    out.data = eo.tokens->value.reshaped({cfg.tokens(), cfg.latent_dim()}).clone();
    out.tag = cfg.kind == TokenizerKind::kPixel ? LatentTag::kPixel
              : cfg.kind == TokenizerKind::kVae
                  ? (deterministic ? LatentTag::kVaeMean : LatentTag::kVaeSample)
                  : LatentTag::kPreQuantization;
    return out;
  }

  Tensor<S> codebook_values() const {
    if (!codebook) throw std::runtime_error("tokenizer: no codebook (kind is not vqvae)");
    return codebook->value;
  }

  QuantizeResult<S> quantize_latent(const LatentGrid<S>& latent) const {
    return quantize(latent, codebook_values());
  }

  // decode a batch of continuous latents [B, N, d] -> images [B,3,H,W]
  Tensor<S> decode_batch(const Tensor<S>& latents) const {
    if (cfg.kind == TokenizerKind::kPixel) return unpatchify(latents);
    Graph<S> g;
    Var<S> z = tokens_to_chw_v(g, g.constant(latents), grid());
    return decoder.fwd(g, z)->value;
  }

  Tensor<S> decode(const LatentGrid<S>& latent) const {
    Tensor<S> batch = latent.data.reshaped({1, latent.tokens(), latent.d});
    Tensor<S> img = decode_batch(batch);
    return img.reshaped({3, cfg.image_size, cfg.image_size});
  }

  Tensor<S> decode(const TokenGrid& tokens) const {
    const Tensor<S> cb = codebook_values();
    LatentGrid<S> lat;
    lat.h = tokens.h;
    lat.w = tokens.w;
    lat.d = cfg.d;
    lat.tag = LatentTag::kQuantized;
    lat.data = Tensor<S>(Shape{tokens.tokens(), cfg.d});
    for (int i = 0; i < tokens.tokens(); ++i) {
      const int code = tokens.codes[i];
      if (code < 0 || code >= cfg.K)
        throw std::runtime_error("decode: invalid code index " + std::to_string(code) +
                                 " at position (" + std::to_string(i / tokens.w) + "," +
                                 std::to_string(i % tokens.w) + ")");
      for (int j = 0; j < cfg.d; ++j) lat.data[i * cfg.d + j] = cb[code * cfg.d + j];
    }
    return decode(lat);
  }

  // codes for a batch [B,3,H,W] -> per-sample TokenGrids
  std::vector<TokenGrid> encode_codes_batch(const Tensor<S>& images) const {
    Graph<S> g;
    EncodeOut eo = encode_graph(g, images, true, nullptr);
    const int B = images.shape[0];
    const int N = cfg.tokens();
    std::vector<TokenGrid> out(B);
    for (int b = 0; b < B; ++b) {
      LatentGrid<S> lat;
      lat.h = lat.w = grid();
      lat.d = cfg.d;
      lat.data = Tensor<S>(Shape{N, cfg.d});
      std::copy(eo.tokens->value.buf->begin() + static_cast<int64_t>(b) * N * cfg.d,
                eo.tokens->value.buf->begin() + static_cast<int64_t>(b + 1) * N * cfg.d,
                lat.data.buf->begin());
      out[b] = quantize_latent(lat).tokens;
    }
    return out;
  }

  // pre-quantization (or vae-mean / pixel) latents for a batch -> [B, N, d]
  Tensor<S> encode_latents_batch(const Tensor<S>& images) const {
    Graph<S> g;
    EncodeOut eo = encode_graph(g, images, true, nullptr);
    return eo.tokens->value.clone();
  }

  // ---- pixel mode patchify/unpatchify (exact inverses) ----

  Tensor<S> patchify(const Tensor<S>& images) const {
    const int B = images.shape[0], H = images.shape[2], W = images.shape[3];
    const int p = cfg.downsample, gh = H / p, gw = W / p;
    Tensor<S> out(Shape{B, gh * gw, 3 * p * p});
    for (int b = 0; b < B; ++b)
      for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
          for (int c = 0; c < 3; ++c)
            for (int py = 0; py < p; ++py)
              for (int px = 0; px < p; ++px) {
                const int64_t src =
                    ((static_cast<int64_t>(b) * 3 + c) * H + gy * p + py) * W + gx * p + px;
                const int64_t dst =
                    (static_cast<int64_t>(b) * gh * gw + gy * gw + gx) * (3 * p * p) +
                    (c * p + py) * p + px;
                out[dst] = images[src];
              }
    return out;
  }

  Tensor<S> unpatchify(const Tensor<S>& latents) const {
    const int B = latents.shape[0];
    const int p = cfg.downsample, G = grid(), H = cfg.image_size;
    Tensor<S> out(Shape{B, 3, H, H});
    for (int b = 0; b < B; ++b)
      for (int gy = 0; gy < G; ++gy)
        for (int gx = 0; gx < G; ++gx)
          for (int c = 0; c < 3; ++c)
            for (int py = 0; py < p; ++py)
              for (int px = 0; px < p; ++px) {
                const int64_t dst =
                    ((static_cast<int64_t>(b) * 3 + c) * H + gy * p + py) * H + gx * p + px;
                const int64_t src = (static_cast<int64_t>(b) * G * G + gy * G + gx) * (3 * p * p) +
                                    (c * p + py) * p + px;
                out[dst] = latents[src];
              }
    return out;
  }

  void save(const std::string& path) const { save_checkpoint(path, cfg.to_json(), params); }

  static Tokenizer load(const std::string& path) {
    nlohmann::json cfg_json = load_checkpoint_config(path);
    Tokenizer t(TokenizerConfig::from_json(cfg_json));
    load_checkpoint(path, t.params);
    return t;
  }
};

// Closed-form KL(q || N(0,I)) for a diagonal Gaussian, summed over dims,
// averaged over the batch: 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
template <class S>
Var<S> gaussian_kl(Graph<S>& g, Var<S> mu, Var<S> logvar, int batch) {
  Var<S> var = vexp(g, logvar);
  Var<S> term = sub(g, add(g, mul(g, mu, mu), var), add_scalar(g, logvar, 1.0));
  return scale(g, sum_all(g, term), 0.5 / batch);
}

}  // namespace cgl
