// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cgl/core/tensor.hpp"

namespace cgl {

// Forward-diffusion schedule: beta_t for t = 1..T, abar_t = prod(1 - beta_s).
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta;       // index t-1
  std::vector<double> alpha_bar;  // index t-1

  static DiffusionSchedule linear(int T, double beta_lo = 1e-4, double beta_hi = 0.02) {
    DiffusionSchedule s;
    s.T = T;
    double abar = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double b = T == 1 ? beta_lo : beta_lo + (beta_hi - beta_lo) * (t - 1) / (T - 1);
      s.beta.push_back(b);
      abar *= 1.0 - b;
      s.alpha_bar.push_back(abar);
    }
    s.validate();
    return s;
  }

  double beta_at(int t) const { return beta.at(t - 1); }
  double abar(int t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }

  void validate() const {
    if (T < 1 || static_cast<int>(beta.size()) != T) throw std::runtime_error("schedule: bad T");
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
      if (beta_at(t) <= 0.0 || beta_at(t) >= 1.0)
        throw std::runtime_error("schedule: beta out of (0,1) at t=" + std::to_string(t));
      if (abar(t) >= prev) throw std::runtime_error("schedule: alpha_bar not strictly decreasing");
      prev = abar(t);
    }
  }
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class S>
Tensor<S> diffusion_forward(const Tensor<S>& x0, int t, const Tensor<S>& eps,
                            const DiffusionSchedule& sched) {
  if (t < 1 || t > sched.T)
    throw std::runtime_error("diffusion_forward: t out of range [1," + std::to_string(sched.T) +
                             "]");
  if (x0.shape != eps.shape) throw std::runtime_error("diffusion_forward: shape mismatch");
  const double a = std::sqrt(sched.abar(t));
  const double b = std::sqrt(1.0 - sched.abar(t));
  Tensor<S> xt(x0.shape);
  for (int64_t i = 0; i < x0.size(); ++i)
    xt[i] = static_cast<S>(a * x0[i] + b * eps[i]);
  return xt;
}

// One ancestral reverse step given the predicted noise. sigma_scale = 0
// selects the deterministic-variance variant.
template <class S>
Tensor<S> diffusion_reverse_step(const Tensor<S>& xt, const Tensor<S>& eps_hat, int t,
                                 const DiffusionSchedule& sched, Rng* rng,
                                 double sigma_scale = 1.0) {
  const double bt = sched.beta_at(t);
  const double at = 1.0 - bt;
  const double abar_t = sched.abar(t);
  const double abar_prev = sched.abar(t - 1);
  const double mean_c1 = 1.0 / std::sqrt(at);
  const double mean_c2 = bt / std::sqrt(1.0 - abar_t);
  const double sigma =
      t > 1 ? sigma_scale * std::sqrt((1.0 - abar_prev) / (1.0 - abar_t) * bt) : 0.0;
  Tensor<S> out(xt.shape);
  for (int64_t i = 0; i < xt.size(); ++i) {
    double v = mean_c1 * (static_cast<double>(xt[i]) - mean_c2 * eps_hat[i]);
    if (sigma > 0.0) v += sigma * rng->normal();
    out[i] = static_cast<S>(v);
  }
  return out;
}

// mean squared error between true and predicted noise
template <class S>
double dit_loss(const Tensor<S>& eps, const Tensor<S>& eps_hat) {
  if (eps.shape != eps_hat.shape) throw std::runtime_error("dit_loss: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < eps.size(); ++i) {
    const double d = static_cast<double>(eps[i]) - static_cast<double>(eps_hat[i]);
    acc += d * d;
  }
  return acc / eps.size();
}

}  // namespace cgl
