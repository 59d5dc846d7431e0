// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "cgl/core/tensor.hpp"

namespace cgl {

// Reverse-mode autodiff over a per-step tape. Nodes are created in forward
// order, which is a valid topological order for the backward sweep.
template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated on first accumulation; leaves share the param grad buffer
  bool requires_grad = false;
  std::function<void()> backprop;
};

template <class S>
using Var = Node<S>*;

template <class S>
Tensor<S>& gbuf(Node<S>* n) {
  if (!n->grad.defined()) n->grad = Tensor<S>(n->value.shape);
  return n->grad;
}

template <class S>
class Graph {
 public:
  Node<S>* make(Tensor<S> value, bool requires_grad) {
    nodes_.push_back(std::make_unique<Node<S>>());
    Node<S>* n = nodes_.back().get();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
  }

  Node<S>* constant(Tensor<S> value) { return make(std::move(value), false); }

  // Leaf whose grad accumulates into an externally owned buffer.
  Node<S>* leaf(const Tensor<S>& value, const Tensor<S>& grad_sink) {
    Node<S>* n = make(value, true);
    n->grad = grad_sink;
    return n;
  }

  void backward(Node<S>* loss) {
    if (loss->value.size() != 1) throw std::runtime_error("backward: loss must be scalar");
    gbuf(loss)[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<S>* n = it->get();
      if (n->backprop && n->grad.defined()) n->backprop();
    }
  }

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node<S>>> nodes_;
};

namespace detail {
template <class S>
bool same_shape(const Node<S>* a, const Node<S>* b) {
  return a->value.shape == b->value.shape;
}
}  // namespace detail

// ---- elementwise binary ----

template <class S>
Var<S> add(Graph<S>& g, Var<S> a, Var<S> b) {
  if (!detail::same_shape(a, b)) throw std::runtime_error("add: shape mismatch");
  Tensor<S> y(a->value.shape);
  for (int64_t i = 0; i < y.size(); ++i) y[i] = a->value[i] + b->value[i];
  Var<S> n = g.make(std::move(y), a->requires_grad || b->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, b] {
      const Tensor<S>& dy = n->grad;
      if (a->requires_grad) {
        Tensor<S>& da = gbuf(a);
        for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b->requires_grad) {
        Tensor<S>& db = gbuf(b);
        for (int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    };
  return n;
}

template <class S>
Var<S> sub(Graph<S>& g, Var<S> a, Var<S> b) {
  if (!detail::same_shape(a, b)) throw std::runtime_error("sub: shape mismatch");
  Tensor<S> y(a->value.shape);
  for (int64_t i = 0; i < y.size(); ++i) y[i] = a->value[i] - b->value[i];
  Var<S> n = g.make(std::move(y), a->requires_grad || b->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, b] {
      const Tensor<S>& dy = n->grad;
      if (a->requires_grad) {
        Tensor<S>& da = gbuf(a);
        for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b->requires_grad) {
        Tensor<S>& db = gbuf(b);
        for (int64_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
      }
    };
  return n;
}

template <class S>
Var<S> mul(Graph<S>& g, Var<S> a, Var<S> b) {
  if (!detail::same_shape(a, b)) throw std::runtime_error("mul: shape mismatch");
  Tensor<S> y(a->value.shape);
  for (int64_t i = 0; i < y.size(); ++i) y[i] = a->value[i] * b->value[i];
  Var<S> n = g.make(std::move(y), a->requires_grad || b->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, b] {
      const Tensor<S>& dy = n->grad;
      if (a->requires_grad) {
        Tensor<S>& da = gbuf(a);
        for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b->value[i];
      }
      if (b->requires_grad) {
        Tensor<S>& db = gbuf(b);
        for (int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a->value[i];
      }
    };
  return n;
}

template <class S>
Var<S> scale(Graph<S>& g, Var<S> a, double k) {
  Tensor<S> y(a->value.shape);
  for (int64_t i = 0; i < y.size(); ++i) y[i] = a->value[i] * static_cast<S>(k);
  Var<S> n = g.make(std::move(y), a->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, k] {
      Tensor<S>& da = gbuf(a);
      for (int64_t i = 0; i < n->grad.size(); ++i) da[i] += n->grad[i] * static_cast<S>(k);
    };
  return n;
}

template <class S>
Var<S> add_scalar(Graph<S>& g, Var<S> a, double k) {
  Tensor<S> y(a->value.shape);
  for (int64_t i = 0; i < y.size(); ++i) y[i] = a->value[i] + static_cast<S>(k);
  Var<S> n = g.make(std::move(y), a->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a] {
      Tensor<S>& da = gbuf(a);
      for (int64_t i = 0; i < n->grad.size(); ++i) da[i] += n->grad[i];
    };
  return n;
}

// ---- elementwise unary ----

namespace detail {
template <class S, class F, class DF>
Var<S> unary(Graph<S>& g, Var<S> a, F f, DF df) {
  Tensor<S> y(a->value.shape);
  for (int64_t i = 0; i < y.size(); ++i) y[i] = f(a->value[i]);
  Var<S> n = g.make(std::move(y), a->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, df] {
      Tensor<S>& da = gbuf(a);
      for (int64_t i = 0; i < n->grad.size(); ++i)
        da[i] += n->grad[i] * df(a->value[i], n->value[i]);
    };
  return n;
}
}  // namespace detail

template <class S>
Var<S> relu(Graph<S>& g, Var<S> a) {
  return detail::unary(
      g, a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
Var<S> gelu(Graph<S>& g, Var<S> a) {
  return detail::unary(
      g, a,
      [](S x) {
        return static_cast<S>(0.5 * static_cast<double>(x) *
                              (1.0 + std::erf(static_cast<double>(x) * M_SQRT1_2)));
      },
      [](S x, S) {
        const double xd = static_cast<double>(x);
        const double phi = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
        return static_cast<S>(phi + xd * pdf);
      });
}

template <class S>
Var<S> silu(Graph<S>& g, Var<S> a) {
  return detail::unary(
      g, a,
      [](S x) {
        const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
        return static_cast<S>(static_cast<double>(x) * s);
      },
      [](S x, S) {
        const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
        return static_cast<S>(s * (1.0 + static_cast<double>(x) * (1.0 - s)));
      });
}

template <class S>
Var<S> vtanh(Graph<S>& g, Var<S> a) {
  return detail::unary(
      g, a, [](S x) { return static_cast<S>(std::tanh(static_cast<double>(x))); },
      [](S, S y) { return static_cast<S>(1.0 - static_cast<double>(y) * static_cast<double>(y)); });
}

template <class S>
Var<S> sigmoid(Graph<S>& g, Var<S> a) {
  return detail::unary(
      g, a,
      [](S x) { return static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
      [](S, S y) {
        return static_cast<S>(static_cast<double>(y) * (1.0 - static_cast<double>(y)));
      });
}

template <class S>
Var<S> vexp(Graph<S>& g, Var<S> a) {
  return detail::unary(
      g, a, [](S x) { return static_cast<S>(std::exp(static_cast<double>(x))); },
      [](S, S y) { return y; });
}

// ---- reductions ----

template <class S>
Var<S> sum_all(Graph<S>& g, Var<S> a) {
  S acc = S(0);
  for (int64_t i = 0; i < a->value.size(); ++i) acc += a->value[i];
  Var<S> n = g.make(Tensor<S>::scalar(acc), a->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a] {
      Tensor<S>& da = gbuf(a);
      const S dy = n->grad[0];
      for (int64_t i = 0; i < da.size(); ++i) da[i] += dy;
    };
  return n;
}

template <class S>
Var<S> mean_all(Graph<S>& g, Var<S> a) {
  return scale(g, sum_all(g, a), 1.0 / static_cast<double>(a->value.size()));
}

// ---- structural ----

template <class S>
Var<S> reshape(Graph<S>& g, Var<S> a, Shape sh) {
  Var<S> n = g.make(a->value.reshaped(sh), a->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a] {
      Tensor<S>& da = gbuf(a);
      for (int64_t i = 0; i < n->grad.size(); ++i) da[i] += n->grad[i];
    };
  return n;
}

template <class S>
Var<S> detach(Graph<S>& g, Var<S> a) {
  return g.constant(a->value);
}

template <class S>
Var<S> concat_last(Graph<S>& g, const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw std::runtime_error("concat_last: empty input");
  const int64_t rows = xs[0]->value.rows();
  int64_t total = 0;
  bool req = false;
  for (Var<S> x : xs) {
    if (x->value.rows() != rows) throw std::runtime_error("concat_last: row mismatch");
    total += x->value.cols();
    req = req || x->requires_grad;
  }
  Shape sh = xs[0]->value.shape;
  sh.back() = static_cast<int>(total);
  Tensor<S> y(sh);
  int64_t off = 0;
  for (Var<S> x : xs) {
    const int64_t c = x->value.cols();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < c; ++j) y[r * total + off + j] = x->value[r * c + j];
    off += c;
  }
  Var<S> n = g.make(std::move(y), req);
  if (req) {
    std::vector<Var<S>> parents = xs;
    n->backprop = [n, parents, rows, total] {
      int64_t off2 = 0;
      for (Var<S> x : parents) {
        const int64_t c = x->value.cols();
        if (x->requires_grad) {
          Tensor<S>& dx = gbuf(x);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j) dx[r * c + j] += n->grad[r * total + off2 + j];
        }
        off2 += c;
      }
    };
  }
  return n;
}

template <class S>
Var<S> slice_last(Graph<S>& g, Var<S> a, int lo, int len) {
  const int64_t rows = a->value.rows();
  const int64_t c = a->value.cols();
  if (lo < 0 || lo + len > c) throw std::runtime_error("slice_last: out of range");
  Shape sh = a->value.shape;
  sh.back() = len;
  Tensor<S> y(sh);
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < len; ++j) y[r * len + j] = a->value[r * c + lo + j];
  Var<S> n = g.make(std::move(y), a->requires_grad);
  if (n->requires_grad)
    n->backprop = [n, a, lo, len, rows, c] {
      Tensor<S>& da = gbuf(a);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < len; ++j) da[r * c + lo + j] += n->grad[r * len + j];
    };
  return n;
}

}  // namespace cgl
