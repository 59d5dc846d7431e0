// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "cgl/core/nn.hpp"

namespace cgl {

template <class S>
class Adam {
 public:
  explicit Adam(ParamStore<S>& ps, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, double weight_decay = 0.0)
      : ps_(ps), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (auto& p : ps.items()) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    size_t pi = 0;
    for (auto& p : ps_.items()) {
      Tensor<S>& m = m_[pi];
      Tensor<S>& v = v_[pi];
      ++pi;
      for (int64_t i = 0; i < p->value.size(); ++i) {
        double gd = static_cast<double>(p->grad[i]);
        if (wd_ != 0.0) gd += wd_ * static_cast<double>(p->value[i]);
        const double mi = beta1_ * m[i] + (1.0 - beta1_) * gd;
        const double vi = beta2_ * v[i] + (1.0 - beta2_) * gd * gd;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        p->value[i] -= static_cast<S>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  long steps_taken() const { return t_; }

 private:
  ParamStore<S>& ps_;
  double lr_, beta1_, beta2_, eps_, wd_;
  long t_ = 0;
  std::vector<Tensor<S>> m_, v_;
};

// ema <- decay*ema + (1-decay)*online, matched by parameter name
template <class S>
void ema_update(const ParamStore<S>& online, ParamStore<S>& ema, double decay) {
  for (auto& p : ema.items()) {
    const Param<S>* q = online.find(p->name);
    if (!q || q->value.size() != p->value.size())
      throw std::runtime_error("ema_update: shape mismatch at " + p->name);
    for (int64_t i = 0; i < p->value.size(); ++i)
      p->value[i] = static_cast<S>(decay * p->value[i] + (1.0 - decay) * q->value[i]);
  }
}

}  // namespace cgl
