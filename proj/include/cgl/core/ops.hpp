// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cgl/core/graph.hpp"

namespace cgl {

// y = a @ b where a is [.., k] flattened to [m, k], b is [k, n]
template <class S>
Var<S> matmul(Graph<S>& g, Var<S> a, Var<S> b) {
  const int64_t k = b->value.shape[0];
  const int64_t n = b->value.shape[1];
  if (a->value.cols() != k) throw std::runtime_error("matmul: inner dim mismatch");
  const int64_t m = a->value.rows();
  Shape sh = a->value.shape;
  sh.back() = static_cast<int>(n);
  Tensor<S> y(sh);
  y.mat(m, n).noalias() = a->value.mat(m, k) * b->value.mat(k, n);
  Var<S> node = g.make(std::move(y), a->requires_grad || b->requires_grad);
  if (node->requires_grad)
    node->backprop = [node, a, b, m, k, n] {
      auto dy = node->grad.mat(m, n);
      if (a->requires_grad)
        gbuf(a).mat(m, k).noalias() += dy * b->value.mat(k, n).transpose();
      if (b->requires_grad)
        gbuf(b).mat(k, n).noalias() += a->value.mat(m, k).transpose() * dy;
    };
  return node;
}

// y[r,:] = a[r,:] + b  (b has shape [c])
template <class S>
Var<S> add_rowbc(Graph<S>& g, Var<S> a, Var<S> b) {
  const int64_t c = a->value.cols();
  if (b->value.size() != c) throw std::runtime_error("add_rowbc: width mismatch");
  const int64_t rows = a->value.rows();
  Tensor<S> y(a->value.shape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) y[r * c + j] = a->value[r * c + j] + b->value[j];
  Var<S> n = g.make(std::move(y), a->requires_grad || b->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, b, rows, c] {
      const Tensor<S>& dy = n->grad;
      if (a->requires_grad) {
        Tensor<S>& da = gbuf(a);
        for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b->requires_grad) {
        Tensor<S>& db = gbuf(b);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) db[j] += dy[r * c + j];
      }
    };
  return n;
}

template <class S>
Var<S> linear(Graph<S>& g, Var<S> x, Var<S> w, Var<S> b) {
  Var<S> y = matmul(g, x, w);
  return b ? add_rowbc(g, y, b) : y;
}

// LayerNorm over the last dimension with affine parameters.
template <class S>
Var<S> layernorm(Graph<S>& g, Var<S> x, Var<S> gamma, Var<S> beta, double eps = 1e-5) {
  const int64_t c = x->value.cols();
  const int64_t rows = x->value.rows();
  if (gamma->value.size() != c || beta->value.size() != c)
    throw std::runtime_error("layernorm: affine width mismatch");
  Tensor<S> y(x->value.shape);
  Tensor<S> xhat(x->value.shape);
  Tensor<S> inv_std(Shape{static_cast<int>(rows)});
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x->value.data() + r * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<S>(inv);
    for (int64_t j = 0; j < c; ++j) {
      const S xh = static_cast<S>((xr[j] - mu) * inv);
      xhat[r * c + j] = xh;
      y[r * c + j] = gamma->value[j] * xh + beta->value[j];
    }
  }
  Var<S> n = g.make(std::move(y), x->requires_grad || gamma->requires_grad || beta->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, gamma, beta, xhat, inv_std, rows, c] {
      const Tensor<S>& dy = n->grad;
      if (gamma->requires_grad) {
        Tensor<S>& dg = gbuf(gamma);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) dg[j] += dy[r * c + j] * xhat[r * c + j];
      }
      if (beta->requires_grad) {
        Tensor<S>& db = gbuf(beta);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) db[j] += dy[r * c + j];
      }
      if (x->requires_grad) {
        Tensor<S>& dx = gbuf(x);
        for (int64_t r = 0; r < rows; ++r) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(dy[r * c + j]) * gamma->value[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[r * c + j];
          }
          const double inv = inv_std[r];
          for (int64_t j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(dy[r * c + j]) * gamma->value[j];
            dx[r * c + j] += static_cast<S>(
                inv * (dxh - sum_dxhat / c - xhat[r * c + j] * sum_dxhat_xhat / c));
          }
        }
      }
    };
  return n;
}

// Multi-head self-attention over packed qkv [B, N, 3*w] with w = heads*hd.
// head_keep[h] == 0 zeroes that head's q/k/v before attention scores.
template <class S>
Var<S> attention(Graph<S>& g, Var<S> qkv, int heads, const std::vector<uint8_t>& head_keep) {
  const Shape& sh = qkv->value.shape;
  if (sh.size() != 3 || sh[2] % 3 != 0) throw std::runtime_error("attention: expect [B,N,3w]");
  const int B = sh[0], N = sh[1], w = sh[2] / 3;
  if (w % heads != 0) throw std::runtime_error("attention: width not divisible by heads");
  const int hd = w / heads;
  if (static_cast<int>(head_keep.size()) != heads)
    throw std::runtime_error("attention: head_keep size mismatch");
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
  using Mat = typename Tensor<S>::Mat;

  Tensor<S> y(Shape{B, N, w});
  Tensor<S> probs(Shape{B, heads, N, N});
  const S* qv = qkv->value.data();
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      Mat q(N, hd), k(N, hd), v(N, hd);
      for (int i = 0; i < N; ++i)
        for (int d = 0; d < hd; ++d) {
          const int64_t base = (static_cast<int64_t>(b) * N + i) * 3 * w + h * hd + d;
          const S keep = head_keep[h] ? S(1) : S(0);
          q(i, d) = qv[base] * keep;
          k(i, d) = qv[base + w] * keep;
          v(i, d) = qv[base + 2 * w] * keep;
        }
      Mat scores = q * k.transpose() * static_cast<S>(scl);
      Mat p(N, N);
      for (int i = 0; i < N; ++i) {
        S mx = scores.row(i).maxCoeff();
        double sum = 0.0;
        for (int j = 0; j < N; ++j) {
          const double e = std::exp(static_cast<double>(scores(i, j) - mx));
          p(i, j) = static_cast<S>(e);
          sum += e;
        }
        for (int j = 0; j < N; ++j) p(i, j) = static_cast<S>(p(i, j) / sum);
      }
      Mat ctx = p * v;
      for (int i = 0; i < N; ++i)
        for (int d = 0; d < hd; ++d)
          y[(static_cast<int64_t>(b) * N + i) * w + h * hd + d] = ctx(i, d);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j)
          probs[((static_cast<int64_t>(b) * heads + h) * N + i) * N + j] = p(i, j);
    }
  }
  Var<S> n = g.make(std::move(y), qkv->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, qkv, probs, B, N, w, heads, hd, scl, head_keep] {
      Tensor<S>& dqkv = gbuf(qkv);
      const S* qv2 = qkv->value.data();
      using M = typename Tensor<S>::Mat;
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
          if (!head_keep[h]) continue;  // zeroed inputs receive zero gradient
          M q(N, hd), k(N, hd), v(N, hd), p(N, N), dy(N, hd);
          for (int i = 0; i < N; ++i)
            for (int d = 0; d < hd; ++d) {
              const int64_t base = (static_cast<int64_t>(b) * N + i) * 3 * w + h * hd + d;
              q(i, d) = qv2[base];
              k(i, d) = qv2[base + w];
              v(i, d) = qv2[base + 2 * w];
              dy(i, d) = n->grad[(static_cast<int64_t>(b) * N + i) * w + h * hd + d];
            }
          for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j)
              p(i, j) = probs[((static_cast<int64_t>(b) * heads + h) * N + i) * N + j];
          M dv = p.transpose() * dy;
          M dp = dy * v.transpose();
          M ds(N, N);
          for (int i = 0; i < N; ++i) {
            const S row_dot = (dp.row(i).array() * p.row(i).array()).sum();
            for (int j = 0; j < N; ++j) ds(i, j) = p(i, j) * (dp(i, j) - row_dot);
          }
          ds *= static_cast<S>(scl);
          M dq = ds * k;
          M dk = ds.transpose() * q;
          for (int i = 0; i < N; ++i)
            for (int d = 0; d < hd; ++d) {
              const int64_t base = (static_cast<int64_t>(b) * N + i) * 3 * w + h * hd + d;
              dqkv[base] += dq(i, d);
              dqkv[base + w] += dk(i, d);
              dqkv[base + 2 * w] += dv(i, d);
            }
        }
      }
    };
  return n;
}

namespace detail {

// im2col for x [C,H,W] -> col [Ho*Wo, C*kh*kw]
template <class S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad, S* col) {
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  int64_t idx = 0;
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < kh; ++dy)
          for (int dx = 0; dx < kw; ++dx) {
            const int iy = oy * stride + dy - pad;
            const int ix = ox * stride + dx - pad;
            col[idx++] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                             ? x[(static_cast<int64_t>(c) * H + iy) * W + ix]
                             : S(0);
          }
}

template <class S>
void col2im_acc(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad, S* x) {
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  int64_t idx = 0;
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < kh; ++dy)
          for (int dx = 0; dx < kw; ++dx) {
            const int iy = oy * stride + dy - pad;
            const int ix = ox * stride + dx - pad;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W)
              x[(static_cast<int64_t>(c) * H + iy) * W + ix] += col[idx];
            ++idx;
          }
}

}  // namespace detail

// conv2d: x [B,C,H,W], w [Co, C*kh*kw], b [Co] (optional) -> y [B,Co,Ho,Wo]
template <class S>
Var<S> conv2d(Graph<S>& g, Var<S> x, Var<S> w, Var<S> b, int kh, int kw, int stride, int pad) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 4) throw std::runtime_error("conv2d: expect [B,C,H,W]");
  const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int Co = w->value.shape[0];
  const int K = C * kh * kw;
  if (w->value.shape[1] != K) throw std::runtime_error("conv2d: weight shape mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int P = Ho * Wo;
  using Mat = typename Tensor<S>::Mat;

  Tensor<S> y(Shape{B, Co, Ho, Wo});
  {
    std::vector<S> colbuf(static_cast<size_t>(P) * K);
    Mat out(P, Co);
    for (int bidx = 0; bidx < B; ++bidx) {
      detail::im2col(x->value.data() + static_cast<int64_t>(bidx) * C * H * W, C, H, W, kh, kw,
                     stride, pad, colbuf.data());
      Eigen::Map<Mat> col(colbuf.data(), P, K);
      out.noalias() = col * w->value.mat(Co, K).transpose();
      S* yb = y.data() + static_cast<int64_t>(bidx) * Co * P;
      for (int p = 0; p < P; ++p)
        for (int co = 0; co < Co; ++co)
          yb[static_cast<int64_t>(co) * P + p] = out(p, co) + (b ? b->value[co] : S(0));
    }
  }
  Var<S> n = g.make(std::move(y),
                    x->requires_grad || w->requires_grad || (b && b->requires_grad));
  if (n->requires_grad)
    n->backprop = [n, x, w, b, B, C, H, W, Co, K, kh, kw, stride, pad, P] {
      using M = typename Tensor<S>::Mat;
      std::vector<S> colbuf(static_cast<size_t>(P) * K);
      M dyb(P, Co);
      for (int bidx = 0; bidx < B; ++bidx) {
        const S* gy = n->grad.data() + static_cast<int64_t>(bidx) * Co * P;
        for (int p = 0; p < P; ++p)
          for (int co = 0; co < Co; ++co) dyb(p, co) = gy[static_cast<int64_t>(co) * P + p];
        detail::im2col(x->value.data() + static_cast<int64_t>(bidx) * C * H * W, C, H, W, kh, kw,
                       stride, pad, colbuf.data());
        Eigen::Map<M> col(colbuf.data(), P, K);
        if (w->requires_grad)
          gbuf(w).mat(Co, K).noalias() += dyb.transpose() * col;
        if (b && b->requires_grad) {
          Tensor<S>& db = gbuf(b);
          for (int co = 0; co < Co; ++co) db[co] += dyb.col(co).sum();
        }
        if (x->requires_grad) {
          M dcol = dyb * w->value.mat(Co, K);
          detail::col2im_acc(dcol.data(), C, H, W, kh, kw, stride, pad,
                             gbuf(x).data() + static_cast<int64_t>(bidx) * C * H * W);
        }
      }
    };
  return n;
}

// nearest-neighbor 2x upsample, x [B,C,H,W] -> [B,C,2H,2W]
template <class S>
Var<S> upsample2x(Graph<S>& g, Var<S> x) {
  const Shape& xs = x->value.shape;
  const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor<S> y(Shape{B, C, 2 * H, 2 * W});
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const S* src = x->value.data() + bc * H * W;
    S* dst = y.data() + bc * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const S v = src[i * W + j];
        dst[(2 * i) * 2 * W + 2 * j] = v;
        dst[(2 * i) * 2 * W + 2 * j + 1] = v;
        dst[(2 * i + 1) * 2 * W + 2 * j] = v;
        dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
      }
  }
  Var<S> n = g.make(std::move(y), x->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, B, C, H, W] {
      Tensor<S>& dx = gbuf(x);
      for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const S* gy = n->grad.data() + bc * 4 * H * W;
        S* gx = dx.data() + bc * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j)
            gx[i * W + j] += gy[(2 * i) * 2 * W + 2 * j] + gy[(2 * i) * 2 * W + 2 * j + 1] +
                             gy[(2 * i + 1) * 2 * W + 2 * j] +
                             gy[(2 * i + 1) * 2 * W + 2 * j + 1];
      }
    };
  return n;
}

// global average pool, x [B,C,H,W] -> [B,C]
template <class S>
Var<S> mean_spatial(Graph<S>& g, Var<S> x) {
  const Shape& xs = x->value.shape;
  const int B = xs[0], C = xs[1];
  const int64_t hw = static_cast<int64_t>(xs[2]) * xs[3];
  Tensor<S> y(Shape{B, C});
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    double acc = 0.0;
    const S* src = x->value.data() + bc * hw;
    for (int64_t i = 0; i < hw; ++i) acc += src[i];
    y[bc] = static_cast<S>(acc / hw);
  }
  Var<S> n = g.make(std::move(y), x->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, hw] {
      Tensor<S>& dx = gbuf(x);
      for (int64_t bc = 0; bc < n->grad.size(); ++bc) {
        const S d = static_cast<S>(n->grad[bc] / hw);
        S* gx = dx.data() + bc * hw;
        for (int64_t i = 0; i < hw; ++i) gx[i] += d;
      }
    };
  return n;
}

// select rows of x [R,c] by index list
template <class S>
Var<S> gather_rows(Graph<S>& g, Var<S> x, std::vector<int> idx) {
  const int64_t c = x->value.cols();
  const int64_t rows = x->value.rows();
  Tensor<S> y(Shape{static_cast<int>(idx.size()), static_cast<int>(c)});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= rows) throw std::runtime_error("gather_rows: index out of range");
    for (int64_t j = 0; j < c; ++j) y[r * c + j] = x->value[idx[r] * c + j];
  }
  Var<S> n = g.make(std::move(y), x->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, idx, c] {
      Tensor<S>& dx = gbuf(x);
      for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t j = 0; j < c; ++j) dx[idx[r] * c + j] += n->grad[r * c + j];
    };
  return n;
}

// table [V,d], ids [M] -> [M,d]
template <class S>
Var<S> embedding(Graph<S>& g, Var<S> table, const std::vector<int>& ids) {
  const int V = table->value.shape[0];
  const int64_t d = table->value.shape[1];
  Tensor<S> y(Shape{static_cast<int>(ids.size()), static_cast<int>(d)});
  for (size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= V) throw std::runtime_error("embedding: id out of range");
    for (int64_t j = 0; j < d; ++j) y[r * d + j] = table->value[ids[r] * d + j];
  }
  Var<S> n = g.make(std::move(y), table->requires_grad);
  if (n->requires_grad) {
    std::vector<int> ids_copy = ids;
    n->backprop = [n, table, ids_copy, d] {
      Tensor<S>& dt = gbuf(table);
      for (size_t r = 0; r < ids_copy.size(); ++r)
        for (int64_t j = 0; j < d; ++j) dt[ids_copy[r] * d + j] += n->grad[r * d + j];
    };
  }
  return n;
}

// rows where replace[r] != 0 become vector e; used for [MASK] token injection
template <class S>
Var<S> blend_rows(Graph<S>& g, Var<S> x, const std::vector<uint8_t>& replace, Var<S> e) {
  const int64_t c = x->value.cols();
  const int64_t rows = x->value.rows();
  if (static_cast<int64_t>(replace.size()) != rows)
    throw std::runtime_error("blend_rows: mask length mismatch");
  if (e->value.size() != c) throw std::runtime_error("blend_rows: vector width mismatch");
  Tensor<S> y(x->value.shape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j)
      y[r * c + j] = replace[r] ? e->value[j] : x->value[r * c + j];
  Var<S> n = g.make(std::move(y), x->requires_grad || e->requires_grad);
  if (n->requires_grad) {
    std::vector<uint8_t> rep = replace;
    n->backprop = [n, x, e, rep, rows, c] {
      if (x->requires_grad) {
        Tensor<S>& dx = gbuf(x);
        for (int64_t r = 0; r < rows; ++r)
          if (!rep[r])
            for (int64_t j = 0; j < c; ++j) dx[r * c + j] += n->grad[r * c + j];
      }
      if (e->requires_grad) {
        Tensor<S>& de = gbuf(e);
        for (int64_t r = 0; r < rows; ++r)
          if (rep[r])
            for (int64_t j = 0; j < c; ++j) de[j] += n->grad[r * c + j];
      }
    };
  }
  return n;
}

// y[b,i,:] = x[b,i,:] + t[i,:]  (positional table broadcast over batch)
template <class S>
Var<S> add_tokenwise(Graph<S>& g, Var<S> x, Var<S> table) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3) throw std::runtime_error("add_tokenwise: expect [B,N,d]");
  const int B = xs[0], N = xs[1], d = xs[2];
  if (table->value.size() != static_cast<int64_t>(N) * d)
    throw std::runtime_error("add_tokenwise: table shape mismatch");
  Tensor<S> y(xs);
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i)
      y[b * N * static_cast<int64_t>(d) + i] = x->value[b * N * static_cast<int64_t>(d) + i] +
                                               table->value[i];
  Var<S> n = g.make(std::move(y), x->requires_grad || table->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, table, B, N, d] {
      const int64_t nd = static_cast<int64_t>(N) * d;
      if (x->requires_grad) {
        Tensor<S>& dx = gbuf(x);
        for (int64_t i = 0; i < n->grad.size(); ++i) dx[i] += n->grad[i];
      }
      if (table->requires_grad) {
        Tensor<S>& dt = gbuf(table);
        for (int b = 0; b < B; ++b)
          for (int64_t i = 0; i < nd; ++i) dt[i] += n->grad[b * nd + i];
      }
    };
  return n;
}

// prepend one learned vector at token position 0: [B,N,d] -> [B,N+1,d]
template <class S>
Var<S> prepend_token(Graph<S>& g, Var<S> x, Var<S> tok) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3) throw std::runtime_error("prepend_token: expect [B,N,d]");
  const int B = xs[0], N = xs[1], d = xs[2];
  if (tok->value.size() != d) throw std::runtime_error("prepend_token: width mismatch");
  Tensor<S> y(Shape{B, N + 1, d});
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < d; ++j) y[(static_cast<int64_t>(b) * (N + 1)) * d + j] = tok->value[j];
    for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i)
      y[(static_cast<int64_t>(b) * (N + 1) + 1) * d + i] = x->value[static_cast<int64_t>(b) * N * d + i];
  }
  Var<S> n = g.make(std::move(y), x->requires_grad || tok->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, tok, B, N, d] {
      if (tok->requires_grad) {
        Tensor<S>& dt = gbuf(tok);
        for (int b = 0; b < B; ++b)
          for (int j = 0; j < d; ++j) dt[j] += n->grad[(static_cast<int64_t>(b) * (N + 1)) * d + j];
      }
      if (x->requires_grad) {
        Tensor<S>& dx = gbuf(x);
        for (int b = 0; b < B; ++b)
          for (int64_t i = 0; i < static_cast<int64_t>(N) * d; ++i)
            dx[static_cast<int64_t>(b) * N * d + i] +=
                n->grad[(static_cast<int64_t>(b) * (N + 1) + 1) * d + i];
      }
    };
  return n;
}

// replace chosen columns of x [R,c] with constant values [R, |cols|];
// replaced columns pass no gradient (used for neuron patching)
template <class S>
Var<S> replace_cols(Graph<S>& g, Var<S> x, const std::vector<int>& cols,
                    const Tensor<S>& values) {
  const int64_t rows = x->value.rows();
  const int64_t c = x->value.cols();
  for (int j : cols)
    if (j < 0 || j >= c) throw std::runtime_error("replace_cols: column out of range");
  if (values.size() != rows * static_cast<int64_t>(cols.size()))
    throw std::runtime_error("replace_cols: values shape mismatch");
  Tensor<S> y = x->value.clone();
  for (int64_t r = 0; r < rows; ++r)
    for (size_t k = 0; k < cols.size(); ++k)
      y[r * c + cols[k]] = values[r * cols.size() + k];
  Var<S> n = g.make(std::move(y), x->requires_grad);
  if (n->requires_grad) {
    std::vector<int> cc = cols;
    n->backprop = [n, x, cc, rows, c] {
      std::vector<uint8_t> keep(c, 1);
      for (int j : cc) keep[j] = 0;
      Tensor<S>& dx = gbuf(x);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j)
          if (keep[j]) dx[r * c + j] += n->grad[r * c + j];
    };
  }
  return n;
}

// adaLN modulation: y[b,i,:] = x[b,i,:] * (1 + scale[b,:]) + shift[b,:]
template <class S>
Var<S> affine_tokens(Graph<S>& g, Var<S> x, Var<S> scale_v, Var<S> shift_v) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3) throw std::runtime_error("affine_tokens: expect [B,N,d]");
  const int B = xs[0], N = xs[1], d = xs[2];
  Tensor<S> y(xs);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j) {
        const int64_t off = (static_cast<int64_t>(b) * N + i) * d + j;
        y[off] = x->value[off] * (S(1) + scale_v->value[b * d + j]) + shift_v->value[b * d + j];
      }
  Var<S> n = g.make(std::move(y),
                    x->requires_grad || scale_v->requires_grad || shift_v->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, scale_v, shift_v, B, N, d] {
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < d; ++j) {
            const int64_t off = (static_cast<int64_t>(b) * N + i) * d + j;
            const S dy = n->grad[off];
            if (x->requires_grad)
              gbuf(x)[off] += dy * (S(1) + scale_v->value[b * d + j]);
            if (scale_v->requires_grad) gbuf(scale_v)[b * d + j] += dy * x->value[off];
            if (shift_v->requires_grad) gbuf(shift_v)[b * d + j] += dy;
          }
    };
  return n;
}

// y[b,i,:] = x[b,i,:] * gate[b,:]
template <class S>
Var<S> gate_tokens(Graph<S>& g, Var<S> x, Var<S> gate_v) {
  const Shape& xs = x->value.shape;
  if (xs.size() != 3) throw std::runtime_error("gate_tokens: expect [B,N,d]");
  const int B = xs[0], N = xs[1], d = xs[2];
  Tensor<S> y(xs);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < d; ++j) {
        const int64_t off = (static_cast<int64_t>(b) * N + i) * d + j;
        y[off] = x->value[off] * gate_v->value[b * d + j];
      }
  Var<S> n = g.make(std::move(y), x->requires_grad || gate_v->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, x, gate_v, B, N, d] {
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < d; ++j) {
            const int64_t off = (static_cast<int64_t>(b) * N + i) * d + j;
            const S dy = n->grad[off];
            if (x->requires_grad) gbuf(x)[off] += dy * gate_v->value[b * d + j];
            if (gate_v->requires_grad) gbuf(gate_v)[b * d + j] += dy * x->value[off];
          }
    };
  return n;
}

// mean_i -log softmax(logits_i)[target_i], logits [M,K]
template <class S>
Var<S> cross_entropy_mean(Graph<S>& g, Var<S> logits, const std::vector<int>& targets) {
  const int64_t K = logits->value.cols();
  const int64_t M = logits->value.rows();
  if (static_cast<int64_t>(targets.size()) != M)
    throw std::runtime_error("cross_entropy: target count mismatch");
  Tensor<S> probs(Shape{static_cast<int>(M), static_cast<int>(K)});
  double loss = 0.0;
  for (int64_t r = 0; r < M; ++r) {
    const S* lr = logits->value.data() + r * K;
    S mx = lr[0];
    for (int64_t j = 1; j < K; ++j) mx = std::max(mx, lr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < K; ++j) {
      const double e = std::exp(static_cast<double>(lr[j] - mx));
      probs[r * K + j] = static_cast<S>(e);
      sum += e;
    }
    for (int64_t j = 0; j < K; ++j) probs[r * K + j] = static_cast<S>(probs[r * K + j] / sum);
    if (targets[r] < 0 || targets[r] >= K)
      throw std::runtime_error("cross_entropy: target out of range");
    loss -= static_cast<double>(lr[targets[r]] - mx) - std::log(sum);
  }
  loss /= M;
  Var<S> n = g.make(Tensor<S>::scalar(static_cast<S>(loss)), logits->requires_grad);
  if (n->requires_grad) {
    std::vector<int> tgt = targets;
    n->backprop = [n, logits, probs, tgt, M, K] {
      Tensor<S>& dl = gbuf(logits);
      const S dy = n->grad[0];
      for (int64_t r = 0; r < M; ++r)
        for (int64_t j = 0; j < K; ++j) {
          S p = probs[r * K + j];
          if (j == tgt[r]) p -= S(1);
          dl[r * K + j] += dy * p / static_cast<S>(M);
        }
    };
  }
  return n;
}

// mean over all elements of (a-b)^2
template <class S>
Var<S> mse_mean(Graph<S>& g, Var<S> a, Var<S> b) {
  if (!detail::same_shape(a, b)) throw std::runtime_error("mse: shape mismatch");
  const int64_t n_el = a->value.size();
  double acc = 0.0;
  for (int64_t i = 0; i < n_el; ++i) {
    const double d = static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]);
    acc += d * d;
  }
  Var<S> n = g.make(Tensor<S>::scalar(static_cast<S>(acc / n_el)),
                    a->requires_grad || b->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, b, n_el] {
      const S dy = n->grad[0];
      for (int64_t i = 0; i < n_el; ++i) {
        const S d = static_cast<S>(2) * (a->value[i] - b->value[i]) / static_cast<S>(n_el);
        if (a->requires_grad) gbuf(a)[i] += dy * d;
        if (b->requires_grad) gbuf(b)[i] -= dy * d;
      }
    };
  return n;
}

// Gaussian-mixture NLL per row. wlogits [M,m], mu/logvar [M,m*d], target [M,d].
// Variance is var_floor + exp(logvar). Returns [M] of -log p(target).
template <class S>
Var<S> gmm_nll_rows(Graph<S>& g, Var<S> wlogits, Var<S> mu, Var<S> logvar,
                    const Tensor<S>& target, double var_floor) {
  const int64_t M = wlogits->value.rows();
  const int m = static_cast<int>(wlogits->value.cols());
  const int64_t d = target.cols();
  if (mu->value.size() != M * m * d || logvar->value.size() != M * m * d)
    throw std::runtime_error("gmm_nll: parameter shape mismatch");
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  Tensor<S> y(Shape{static_cast<int>(M)});
  Tensor<S> resp(Shape{static_cast<int>(M), m});  // responsibilities, reused in backward
  for (int64_t r = 0; r < M; ++r) {
    // log softmax of mixture weights
    const S* wl = wlogits->value.data() + r * m;
    S wmax = wl[0];
    for (int j = 1; j < m; ++j) wmax = std::max(wmax, wl[j]);
    double wsum = 0.0;
    for (int j = 0; j < m; ++j) wsum += std::exp(static_cast<double>(wl[j] - wmax));
    const double logwsum = std::log(wsum);
    std::vector<double> t(m);
    for (int j = 0; j < m; ++j) {
      double logn = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        const int64_t off = (r * m + j) * d + k;
        const double var = var_floor + std::exp(static_cast<double>(logvar->value[off]));
        const double diff = static_cast<double>(target[r * d + k]) - mu->value[off];
        logn -= 0.5 * (diff * diff / var + std::log(var) + kLog2Pi);
      }
      t[j] = (static_cast<double>(wl[j] - wmax) - logwsum) + logn;
    }
    double tmax = t[0];
    for (int j = 1; j < m; ++j) tmax = std::max(tmax, t[j]);
    double lse = 0.0;
    for (int j = 0; j < m; ++j) lse += std::exp(t[j] - tmax);
    const double log_p = tmax + std::log(lse);
    y[r] = static_cast<S>(-log_p);
    for (int j = 0; j < m; ++j) resp[r * m + j] = static_cast<S>(std::exp(t[j] - tmax) / lse);
  }
  Var<S> n = g.make(std::move(y), wlogits->requires_grad || mu->requires_grad ||
                                      logvar->requires_grad);
  if (n->requires_grad) {
    Tensor<S> tgt = target;
    n->backprop = [n, wlogits, mu, logvar, resp, tgt, M, m, d, var_floor] {
      for (int64_t r = 0; r < M; ++r) {
        const S dy = n->grad[r];
        if (dy == S(0)) continue;
        // softmax weights for the wlogits jacobian
        const S* wl = wlogits->value.data() + r * m;
        S wmax = wl[0];
        for (int j = 1; j < m; ++j) wmax = std::max(wmax, wl[j]);
        double wsum = 0.0;
        for (int j = 0; j < m; ++j) wsum += std::exp(static_cast<double>(wl[j] - wmax));
        for (int j = 0; j < m; ++j) {
          const double wj = std::exp(static_cast<double>(wl[j] - wmax)) / wsum;
          const double rj = resp[r * m + j];
          if (wlogits->requires_grad)
            gbuf(wlogits)[r * m + j] += dy * static_cast<S>(wj - rj);
          for (int64_t k = 0; k < d; ++k) {
            const int64_t off = (r * m + j) * d + k;
            const double ev = std::exp(static_cast<double>(logvar->value[off]));
            const double var = var_floor + ev;
            const double diff = static_cast<double>(tgt[r * d + k]) - mu->value[off];
            if (mu->requires_grad)
              gbuf(mu)[off] += dy * static_cast<S>(-rj * diff / var);
            if (logvar->requires_grad)
              gbuf(logvar)[off] +=
                  dy * static_cast<S>(-rj * 0.5 * (diff * diff / (var * var) - 1.0 / var) * ev);
          }
        }
      }
    };
  }
  return n;
}

// ---- raw (no-grad) kernels used by samplers and eval ----

template <class S>
void softmax_inplace(S* p, int64_t k) {
  S mx = p[0];
  for (int64_t j = 1; j < k; ++j) mx = std::max(mx, p[j]);
  double sum = 0.0;
  for (int64_t j = 0; j < k; ++j) {
    const double e = std::exp(static_cast<double>(p[j] - mx));
    p[j] = static_cast<S>(e);
    sum += e;
  }
  for (int64_t j = 0; j < k; ++j) p[j] = static_cast<S>(p[j] / sum);
}

}  // namespace cgl
