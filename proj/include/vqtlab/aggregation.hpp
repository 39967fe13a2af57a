// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "vqtlab/vqt.hpp"

namespace vqt {

enum class Within { none, mean, weighted };
enum class Across { concat, weighted, trans_layer };

struct AggregationPlan {
  Within within = Within::none;
  Across across = Across::concat;

  static Within parse_within(const std::string& s) {
    if (s == "none") return Within::none;
    if (s == "mean") return Within::mean;
    if (s == "weighted") return Within::weighted;
    throw ConfigError("aggregation.within: unknown value '" + s + "' (none, mean, weighted)");
  }
  static Across parse_across(const std::string& s) {
    if (s == "concat") return Across::concat;
    if (s == "weighted") return Across::weighted;
    if (s == "trans_layer") return Across::trans_layer;
    throw ConfigError("aggregation.across: unknown value '" + s + "' (concat, weighted, trans_layer)");
  }

  /// Columns kept per layer after within-layer aggregation.
  std::size_t columns(std::size_t tokens) const { return within == Within::none ? tokens : 1; }

  /// Length of the prediction feature vector.
  std::size_t feature_dim(std::size_t dim, std::size_t active_layers, std::size_t tokens) const {
    if (active_layers == 0) return dim;
    switch (across) {
      case Across::concat: return active_layers * dim * columns(tokens) + dim;
      case Across::weighted: return dim * columns(tokens) + dim;
      case Across::trans_layer: return dim;
    }
    return dim;
  }
};

/// Learned aggregation state: within-layer weights per active layer [T]
/// (init 1/T), across-layer weights [|active|] (init 1/|active|), and the
/// extra transformer layer for trans_layer.
template <typename T>
struct AggregatorWeights {
  std::vector<Tensor<T>> within;
  Tensor<T> across;
  std::vector<LayerWeights<T>> trans;  // zero or one layer

  static AggregatorWeights init(const AggregationPlan& plan, const ViTConfig& c, std::size_t active_layers,
                                std::size_t tokens, std::uint64_t seed) {
    AggregatorWeights a;
    if (active_layers == 0) return a;
    if (plan.within == Within::weighted)
      for (std::size_t m = 0; m < active_layers; ++m) a.within.emplace_back(Shape{tokens}, T(1) / T(tokens));
    if (plan.across == Across::weighted) a.across = Tensor<T>({active_layers}, T(1) / T(active_layers));
    if (plan.across == Across::trans_layer) {
      Rng rng(seed);
      ViTConfig tc = c;
      tc.mode = Mode::full;
      a.trans.push_back(LayerWeights<T>::random(tc, rng));
    }
    return a;
  }
};

/// z [.., D, T] -> [.., D, T] (none) or [.., D, 1].
template <typename T>
Var aggregate_within(Graph<T>& g, Var z, const AggregationPlan& plan, Var w = {}) {
  const Shape s = g.shape(z);
  const std::size_t t = s.back();
  switch (plan.within) {
    case Within::none: return z;
    case Within::mean: return mean_cols(g, z);
    case Within::weighted:
      if (!w.valid() || g.shape(w) != Shape{t}) throw ContractError("within-layer weights must have length T");
      return matmul(g, z, reshape(g, w, {t, 1}));
  }
  return z;
}

/// Per-layer features [B, D, k] plus CLS [B, D] -> [B, feature_dim].
/// concat: layer-major flatten then CLS; weighted: sum_m w_m Z'_m then CLS;
/// trans_layer: CLS column of a fresh full-mode layer over [CLS | all Z'].
template <typename T>
Var aggregate_across(Graph<T>& g, const std::vector<Var>& layers, Var cls, const AggregationPlan& plan,
                     const ViTConfig& c, Var across_w = {}, const LayerVars* trans = nullptr) {
  if (layers.empty()) return cls;
  const std::size_t D = g.shape(cls).back();
  for (Var v : layers) {
    const Shape s = g.shape(v);
    if (s[s.size() - 2] != D) throw DimensionError("aggregated features must share the embedding dimension");
  }
  switch (plan.across) {
    case Across::concat: {
      std::vector<Var> parts;
      for (Var v : layers) parts.push_back(flatten_tokens(g, v));
      parts.push_back(cls);
      return concat_cols(g, parts);
    }
    case Across::weighted: {
      if (!across_w.valid() || g.shape(across_w) != Shape{layers.size()}) {
        throw ContractError("across-layer weights must have one entry per active layer");
      }
      std::vector<Var> flat;
      for (Var v : layers) flat.push_back(flatten_tokens(g, v));
      return concat_cols(g, {weighted_sum(g, flat, across_w), cls});
    }
    case Across::trans_layer: {
      if (!trans) throw ContractError("trans_layer aggregation needs its layer weights");
      const std::size_t B = g.shape(cls)[0];
      std::vector<Var> cols{reshape(g, cls, {B, D, 1})};
      for (Var v : layers) cols.push_back(v);
      ViTConfig tc = c;
      tc.mode = Mode::full;
      LayerTrace tr = layer_forward(g, *trans, concat_cols(g, cols), tc);
      return cls_vector(g, tr.output);
    }
  }
  return cls;
}

// Tensor-level forms.

template <typename T>
Tensor<T> aggregate_within(const Tensor<T>& z, const AggregationPlan& plan, const Tensor<T>* w = nullptr) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Var wv = w ? g.constant(*w) : Var{};
  return g.value(aggregate_within(g, g.constant(z), plan, wv));
}

/// Per-layer [D, k] features and CLS [D] -> feature vector.
template <typename T>
Tensor<T> aggregate_across(const std::vector<Tensor<T>>& layers, const Tensor<T>& cls, const AggregationPlan& plan,
                           const ViTConfig& c, AggregatorWeights<T>* weights = nullptr) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  std::vector<Var> vs;
  for (const auto& l : layers) vs.push_back(g.constant(l.reshaped({1, l.rows(), l.cols()})));
  Var wv = weights && !weights->across.empty() ? g.constant(weights->across) : Var{};
  std::optional<LayerVars> trans;
  if (weights && !weights->trans.empty()) trans = bind_layer(g, weights->trans[0], false, bind);
  Var out = aggregate_across(g, vs, g.constant(cls.reshaped({1, cls.size()})), plan, c, wv, trans ? &*trans : nullptr);
  return g.value(out).reshaped({g.value(out).size()});
}

}  // namespace vqt
