// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "vqtlab/tensor.hpp"

namespace vqt {

/// base * 0.5 * (1 + cos(pi * t / horizon)), clamped to [0, horizon].
inline double cosine_lr(double base, std::size_t t, std::size_t horizon) {
  if (horizon == 0) return base;
  const double x = static_cast<double>(std::min(t, horizon)) / static_cast<double>(horizon);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

struct AdamConfig {
  double lr = 0.1;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t horizon = 0;  // cosine horizon in steps; 0 keeps lr constant
};

/// Bias-corrected Adam with decoupled weight decay:
/// p -= lr_t * (mhat / (sqrt(vhat) + eps) + wd * p).
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  std::size_t steps() const { return t_; }
  double current_lr() const { return cosine_lr(cfg_.lr, t_, cfg_.horizon); }
  const AdamConfig& config() const { return cfg_; }

  /// One update for every (param, grad) pair; a null grad counts as zero.
  void step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads) {
    if (params.size() != grads.size()) throw ContractError("adam: parameter and gradient counts differ");
    const double lr = current_lr();
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      auto [it, fresh] = moments_.try_emplace(params[i]);
      if (fresh) it->second = {Tensor<T>(p.shape()), Tensor<T>(p.shape())};
      auto& [m, v] = it->second;
      if (grads[i]) p.require_same_shape(*grads[i], "adam gradient");
      m.require_same_shape(p, "adam moments");
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = grads[i] ? static_cast<double>((*grads[i])[k]) : 0.0;
        m[k] = static_cast<T>(cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g);
        v[k] = static_cast<T>(cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g * g);
        const double mhat = m[k] / c1, vhat = v[k] / c2;
        p[k] = static_cast<T>(p[k] - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[k]));
      }
      if (!p.all_finite()) throw NumericalError("parameter diverged during optimization");
    }
  }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::unordered_map<const Tensor<T>*, std::pair<Tensor<T>, Tensor<T>>> moments_;
};

}  // namespace vqt
