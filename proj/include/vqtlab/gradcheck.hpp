// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "vqtlab/autodiff.hpp"

namespace vqt {

template <typename T>
struct GradCheckReport {
  T max_rel_error = 0;
  std::size_t param = 0;
  std::size_t index = 0;
  T analytic = 0;
  T numeric = 0;
  std::size_t coordinates = 0;
};

/// Compare reverse-mode gradients against central differences.
///
/// `build(graph, vars)` must record a scalar loss from leaves `vars` that
/// mirror `params` one to one. The relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). When
/// `max_coords_per_param` is nonzero, larger tensors are probed on an evenly
/// strided subset of coordinates.
template <typename T, typename Build>
GradCheckReport<T> finite_diff_check(Build&& build, std::span<Tensor<T>* const> params, T h = T(1e-5),
                                     std::size_t max_coords_per_param = 0) {
  std::vector<Tensor<T>> analytic;
  {
    Graph<T> g;
    std::vector<Var> vars;
    for (auto* p : params) vars.push_back(g.leaf(*p, true));
    Var loss = build(g, std::span<const Var>(vars));
    g.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor<T>* gr = g.grad(vars[i]);
      analytic.push_back(gr ? *gr : Tensor<T>(params[i]->shape()));
    }
  }
  auto evaluate = [&]() {
    Graph<T> g;
    typename Graph<T>::NoGrad off(g);
    std::vector<Var> vars;
    for (auto* p : params) vars.push_back(g.leaf(*p, false));
    return g.value(build(g, std::span<const Var>(vars)))[0];
  };

  GradCheckReport<T> report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    const std::size_t n = p.size();
    const std::size_t stride =
        (max_coords_per_param == 0 || n <= max_coords_per_param) ? 1 : (n + max_coords_per_param - 1) / max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const T orig = p[i];
      p[i] = orig + h;
      const T fp = evaluate();
      p[i] = orig - h;
      const T fm = evaluate();
      p[i] = orig;
      const T numeric = (fp - fm) / (T(2) * h);
      const T a = analytic[pi][i];
      const T denom = std::max({std::abs(a), std::abs(numeric), T(1e-8)});
      const T err = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (report.coordinates == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.param = pi;
        report.index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

template <typename T, typename Build>
GradCheckReport<T> finite_diff_check(Build&& build, const std::vector<Tensor<T>*>& params, T h = T(1e-5),
                                     std::size_t max_coords_per_param = 0) {
  return finite_diff_check<T>(std::forward<Build>(build), std::span<Tensor<T>* const>(params), h,
                              max_coords_per_param);
}

}  // namespace vqt
