// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cgl/core/ops.hpp"
#include "cgl/core/rng.hpp"

namespace cgl {

template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool frozen = false;  // frozen params enter graphs as constants
};

// Named parameter registry. Iteration order is creation order; names are
// unique and stable, so optimizer state, EMA copies, and checkpoints align.
template <class S>
class ParamStore {
 public:
  Param<S>* create(const std::string& name, Tensor<S> init) {
    if (by_name_.count(name)) throw std::runtime_error("param exists: " + name);
    auto p = std::make_unique<Param<S>>();
    p->name = name;
    p->value = std::move(init);
    p->grad = Tensor<S>(p->value.shape);
    by_name_[name] = p.get();
    items_.push_back(std::move(p));
    return items_.back().get();
  }

  Param<S>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  const std::vector<std::unique_ptr<Param<S>>>& items() const { return items_; }

  void zero_grad() {
    for (auto& p : items_) p->grad.zero();
  }

  void set_frozen(bool frozen) {
    for (auto& p : items_) p->frozen = frozen;
  }

  int64_t count() const {
    int64_t n = 0;
    for (auto& p : items_) n += p->value.size();
    return n;
  }

  // Deep copy of values under the same names (EMA initialization).
  void copy_values_from(const ParamStore& other) {
    for (auto& p : items_) {
      const Param<S>* q = other.find(p->name);
      if (!q || q->value.size() != p->value.size())
        throw std::runtime_error("copy_values_from: mismatch at " + p->name);
      std::copy(q->value.buf->begin(), q->value.buf->end(), p->value.buf->begin());
    }
  }

 private:
  std::vector<std::unique_ptr<Param<S>>> items_;
  std::unordered_map<std::string, Param<S>*> by_name_;
};

template <class S>
Var<S> use(Graph<S>& g, Param<S>* p) {
  return p->frozen ? g.constant(p->value) : g.leaf(p->value, p->grad);
}

namespace init {
// Per-parameter RNG stream derived from the name keeps initialization
// independent of module construction order.
template <class S>
Tensor<S> normal_(const Shape& sh, const Rng& base, const std::string& name, double stddev) {
  Rng r = base.stream(name);
  return randn<S>(sh, r, stddev);
}
template <class S>
Tensor<S> kaiming(const Shape& sh, const Rng& base, const std::string& name, int fan_in) {
  return normal_<S>(sh, base, name, std::sqrt(2.0 / fan_in));
}
}  // namespace init

template <class S>
struct Linear {
  Param<S>* w = nullptr;  // [in, out]
  Param<S>* b = nullptr;

  Linear() = default;
  Linear(ParamStore<S>& ps, const Rng& rng, const std::string& prefix, int in, int out,
         bool bias = true, double init_scale = 1.0) {
    w = ps.create(prefix + ".w",
                  init::normal_<S>(Shape{in, out}, rng, prefix + ".w",
                                   init_scale * std::sqrt(1.0 / in)));
    if (bias) b = ps.create(prefix + ".b", Tensor<S>(Shape{out}));
  }

  Var<S> fwd(Graph<S>& g, Var<S> x) const {
    Var<S> y = matmul(g, x, use(g, w));
    return b ? add_rowbc(g, y, use(g, b)) : y;
  }
};

template <class S>
struct LayerNorm {
  Param<S>* gamma = nullptr;
  Param<S>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& prefix, int width) {
    gamma = ps.create(prefix + ".g", Tensor<S>(Shape{width}, S(1)));
    beta = ps.create(prefix + ".b", Tensor<S>(Shape{width}));
  }

  Var<S> fwd(Graph<S>& g, Var<S> x) const {
    return layernorm(g, x, use(g, gamma), use(g, beta));
  }
};

template <class S>
struct Conv2d {
  Param<S>* w = nullptr;  // [Co, Ci*kh*kw]
  Param<S>* b = nullptr;
  int kh = 3, kw = 3, stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(ParamStore<S>& ps, const Rng& rng, const std::string& prefix, int ci, int co, int k,
         int stride_, int pad_)
      : kh(k), kw(k), stride(stride_), pad(pad_) {
    w = ps.create(prefix + ".w",
                  init::kaiming<S>(Shape{co, ci * k * k}, rng, prefix + ".w", ci * k * k));
    b = ps.create(prefix + ".b", Tensor<S>(Shape{co}));
  }

  Var<S> fwd(Graph<S>& g, Var<S> x) const {
    return conv2d(g, x, use(g, w), use(g, b), kh, kw, stride, pad);
  }
};

// two-layer MLP with GELU
template <class S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<S>& ps, const Rng& rng, const std::string& prefix, int in, int hidden, int out)
      : fc1(ps, rng, prefix + ".fc1", in, hidden), fc2(ps, rng, prefix + ".fc2", hidden, out) {}

  Var<S> fwd(Graph<S>& g, Var<S> x) const { return fc2.fwd(g, gelu(g, fc1.fwd(g, x))); }
};

}  // namespace cgl
