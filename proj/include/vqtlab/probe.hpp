// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "vqtlab/aggregation.hpp"
#include "vqtlab/baselines.hpp"
#include "vqtlab/data.hpp"
#include "vqtlab/selector.hpp"

namespace vqt {

enum class Strategy { linear, finetune, vqt, vpt, head2toe, adaptformer, vpt_vqt, adaptformer_vqt };

inline Strategy parse_strategy(const std::string& s) {
  if (s == "linear") return Strategy::linear;
  if (s == "finetune") return Strategy::finetune;
  if (s == "vqt") return Strategy::vqt;
  if (s == "vpt") return Strategy::vpt;
  if (s == "head2toe") return Strategy::head2toe;
  if (s == "adaptformer") return Strategy::adaptformer;
  if (s == "vpt+vqt") return Strategy::vpt_vqt;
  if (s == "adaptformer+vqt") return Strategy::adaptformer_vqt;
  throw ConfigError("strategy: unknown value '" + s + "'");
}

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::linear: return "linear";
    case Strategy::finetune: return "finetune";
    case Strategy::vqt: return "vqt";
    case Strategy::vpt: return "vpt";
    case Strategy::head2toe: return "head2toe";
    case Strategy::adaptformer: return "adaptformer";
    case Strategy::vpt_vqt: return "vpt+vqt";
    case Strategy::adaptformer_vqt: return "adaptformer+vqt";
  }
  return "?";
}

inline bool uses_queries(Strategy s) {
  return s == Strategy::vqt || s == Strategy::vpt_vqt || s == Strategy::adaptformer_vqt;
}
inline bool uses_prompts(Strategy s) { return s == Strategy::vpt || s == Strategy::vpt_vqt; }
inline bool uses_adapters(Strategy s) { return s == Strategy::adaptformer || s == Strategy::adaptformer_vqt; }
/// Strategies that leave every intermediate feature untouched.
inline bool keeps_backbone_intact(Strategy s) {
  return s == Strategy::linear || s == Strategy::vqt || s == Strategy::head2toe;
}

struct StrategyConfig {
  Strategy strategy = Strategy::vqt;
  std::size_t tokens = 1;         // query tokens per layer
  std::size_t prompt_tokens = 1;  // VPT prompts per layer
  std::string layers = "all";     // layers carrying queries, prompts or adapters
  std::size_t bottleneck = 64;
  double adapter_scale = 0.1;
  AggregationPlan aggregation;
  PoolingPlan pooling = PoolingPlan::uniform(4, 4);
  double fraction = 1.0;  // F for feature selection; 1 disables it
};

/// Tunable-parameter count as the published cost tables tally it: inserted
/// parameters plus head rows for any extra features, without biases.
inline std::size_t count_tunable(const StrategyConfig& s, const ViTConfig& c, std::size_t classes,
                                 std::size_t head2toe_kept = 0) {
  const std::size_t act = count_active(parse_layer_mask(s.layers, c.layers));
  std::size_t n = 0;
  switch (s.strategy) {
    case Strategy::linear: return c.dim * classes;
    case Strategy::finetune: {
      auto w = ViTWeights<float>::layout(c);
      for (auto& [name, shape] : w) n += numel(shape);
      return n + c.dim * classes;
    }
    case Strategy::head2toe: return head2toe_kept * classes;
    default: break;
  }
  if (uses_queries(s.strategy)) n += vqt_param_count(c.dim, act, s.tokens, classes);
  if (uses_prompts(s.strategy)) n += s.prompt_tokens * c.dim * act;
  if (uses_adapters(s.strategy)) n += adapter_param_count(c.dim, act, s.bottleneck);
  return n;
}

/// Per-sample K_m, V_m of the layers that carry queries, plus the final CLS.
/// Valid only while the backbone's intermediate features are fixed.
template <typename T>
struct FeatureCache {
  std::vector<bool> layers;
  std::vector<Tensor<T>> k, v;  // per layer [n, D, 1+N]; empty when not stored
  Tensor<T> cls;                // [n, D]

  std::size_t bytes() const {
    std::size_t b = cls.bytes();
    for (std::size_t m = 0; m < k.size(); ++m) b += k[m].bytes() + v[m].bytes();
    return b;
  }
};

enum class CacheLayout { layer_input, key_value };

/// Bytes per image when caching `layers` layers as 32-bit floats: one [D, 1+N]
/// matrix per layer (Z_{m-1}) or two (K_m and V_m).
inline std::size_t cache_bytes_per_image(const ViTConfig& c, std::size_t layers, CacheLayout layout) {
  const std::size_t per = c.tokens() * c.dim * 4;
  return layers * per * (layout == CacheLayout::key_value ? 2 : 1);
}

/// One minibatch: images as patch columns, or cached per-layer K, V.
template <typename T>
struct Batch {
  Tensor<T> patches;             // [B, C*p*p, N]
  std::vector<Tensor<T>> k, v;   // cached path
  Tensor<T> cls;                 // cached path [B, D]
  bool cached = false;
  std::size_t size = 0;
};

template <typename T>
Batch<T> make_batch(const Dataset<T>& data, std::span<const std::size_t> idx, std::size_t patch,
                    const FeatureCache<T>* cache = nullptr) {
  Batch<T> b;
  b.size = idx.size();
  if (cache) {
    b.cached = true;
    for (std::size_t m = 0; m < cache->layers.size(); ++m) {
      if (!cache->layers[m]) {
        b.k.emplace_back();
        b.v.emplace_back();
        continue;
      }
      b.k.push_back(gather_leading(cache->k[m], idx));
      b.v.push_back(gather_leading(cache->v[m], idx));
    }
    b.cls = gather_leading(cache->cls, idx);
  } else {
    b.patches = patchify(gather_leading(data.images, idx), patch);
  }
  return b;
}

/// A frozen backbone plus the tunable state of one strategy.
template <typename T>
class ProbeModel {
 public:
  ProbeModel(const ViTWeights<T>& backbone, StrategyConfig cfg, std::size_t classes, std::uint64_t seed = 0)
      : base_(&backbone), cfg_(std::move(cfg)), classes_(classes) {
    backbone.config.validate();
    if (classes < 2) throw ConfigError("need at least two classes");
    mask_ = parse_layer_mask(cfg_.layers, backbone.config.layers);
    if (cfg_.strategy == Strategy::head2toe) cfg_.pooling.validate();
    reset(seed);
  }

  const StrategyConfig& strategy() const { return cfg_; }
  const ViTConfig& config() const { return base_->config; }
  std::size_t classes() const { return classes_; }
  const std::vector<bool>& layer_mask() const { return mask_; }
  std::size_t query_layers() const { return uses_queries(cfg_.strategy) ? queries_.active_count() : 0; }

  ViTWeights<T>& weights() { return tuned_ ? *tuned_ : const_cast<ViTWeights<T>&>(*base_); }
  QueryTokenSet<T>& queries() { return queries_; }
  PromptSet<T>& prompts() { return prompts_; }
  AdapterWeights<T>& adapters() { return adapters_; }
  AggregatorWeights<T>& aggregator() { return agg_; }
  Tensor<T>& head_w() { return head_w_; }
  Tensor<T>& head_b() { return head_b_; }

  /// Fresh tunable state. The head starts at zero.
  void reset(std::uint64_t seed) {
    const ViTConfig& c = config();
    Rng rng(seed);
    tuned_.reset();
    if (cfg_.strategy == Strategy::finetune) tuned_ = *base_;
    std::vector<bool> none(c.layers, false);
    queries_ = QueryTokenSet<T>::random(c, cfg_.tokens, uses_queries(cfg_.strategy) ? mask_ : none, rng.fork());
    prompts_ = PromptSet<T>::random(c, cfg_.prompt_tokens, uses_prompts(cfg_.strategy) ? mask_ : none, rng.fork());
    if (uses_adapters(cfg_.strategy)) {
      adapters_ = AdapterWeights<T>::random(c, cfg_.bottleneck, cfg_.adapter_scale, mask_, rng.fork());
    } else {
      adapters_ = AdapterWeights<T>{};
      adapters_.active = none;
      adapters_.down.assign(c.layers, Tensor<T>());
      adapters_.up.assign(c.layers, Tensor<T>());
      rng.fork();
    }
    agg_ = AggregatorWeights<T>::init(cfg_.aggregation, c, query_layers(), cfg_.tokens, rng.fork());
    head_w_ = Tensor<T>({feature_dim(), classes_});
    head_b_ = Tensor<T>({classes_});
  }

  std::size_t feature_dim() const {
    const ViTConfig& c = config();
    if (cfg_.strategy == Strategy::head2toe) return cfg_.pooling.dimension(c);
    if (uses_queries(cfg_.strategy)) return cfg_.aggregation.feature_dim(c.dim, query_layers(), cfg_.tokens);
    return c.dim;
  }

  /// Layout of the feature vector for selection and layer importance.
  FeatureLayout feature_layout() const {
    const ViTConfig& c = config();
    if (uses_queries(cfg_.strategy) && cfg_.aggregation.across == Across::concat && query_layers() > 0)
      return {query_layers(), c.dim * cfg_.aggregation.columns(cfg_.tokens), c.dim};
    if (cfg_.strategy == Strategy::head2toe) return {1, feature_dim(), 0};
    return {0, 0, feature_dim()};
  }

  bool cacheable() const {
    return cfg_.strategy == Strategy::linear || cfg_.strategy == Strategy::vqt;
  }

  /// Prediction features [B, feature_dim].
  Var features(Graph<T>& g, Binder<T>& bind, const Batch<T>& b) {
    const ViTConfig& c = config();
    const bool ft = cfg_.strategy == Strategy::finetune;
    ViTWeights<T>& w = weights();
    std::vector<Var> zps;
    Var cls, z0;
    std::vector<LayerTrace> traces;
    if (b.cached) {
      if (!cacheable()) throw ContractError("cache used under a strategy whose intermediate features change per step");
      for (std::size_t m = 0; m < c.layers; ++m) {
        if (!queries_.active[m]) continue;
        if (b.k[m].empty()) throw ContractError("feature cache lacks layer " + std::to_string(m));
        auto s = g.scope(Category::query_branch, static_cast<int>(m));
        LayerVars lv = bind_layer(g, w.layers[m], false, bind);
        zps.push_back(query_column(g, bind, m, lv, g.constant(b.k[m]), g.constant(b.v[m]), nullptr));
      }
      auto s = g.scope(Category::head);
      cls = g.constant(b.cls);
    } else {
      Var z;
      {
        auto s = g.scope(Category::backbone_main);
        z0 = z = embed_patches(g, bind_embedding(g, w, ft, bind), g.constant(b.patches));
      }
      for (std::size_t m = 0; m < c.layers; ++m) {
        auto s = g.scope(Category::backbone_main, static_cast<int>(m));
        LayerVars lv = bind_layer(g, w.layers[m], ft, bind);
        std::optional<AdapterHook> hook;
        if (adapters_.active[m]) {
          auto as = g.scope(Category::adapter, static_cast<int>(m));
          hook = AdapterHook{bind(g, adapters_.down[m], true), bind(g, adapters_.up[m], true), adapters_.scale};
        }
        Var prompt;
        if (prompts_.active[m]) {
          auto ps = g.scope(Category::prompt_branch, static_cast<int>(m));
          prompt = bind(g, prompts_.prompts[m], true);
        }
        LayerTrace tr = vpt_layer(g, lv, z, prompt, c, hook ? &*hook : nullptr);
        if (queries_.active[m]) {
          auto qs = g.scope(Category::query_branch, static_cast<int>(m));
          zps.push_back(query_column(g, bind, m, lv, tr.k, tr.v, hook ? &*hook : nullptr));
        }
        if (cfg_.strategy == Strategy::head2toe) traces.push_back(tr);
        z = tr.output;
      }
      auto s = g.scope(Category::head);
      cls = cls_vector(g, z);
    }
    auto s = g.scope(Category::head);
    if (cfg_.strategy == Strategy::head2toe) {
      if (b.cached) throw ContractError("head2toe features need the full trace");
      return head2toe_features(g, traces, z0, cfg_.pooling);
    }
    if (!uses_queries(cfg_.strategy) || zps.empty()) return cls;
    Var across = agg_.across.empty() ? Var{} : bind(g, agg_.across, true);
    std::optional<LayerVars> trans;
    if (!agg_.trans.empty()) trans = bind_layer(g, agg_.trans[0], true, bind);
    return aggregate_across(g, zps, cls, cfg_.aggregation, c, across, trans ? &*trans : nullptr);
  }

  Var logits(Graph<T>& g, Binder<T>& bind, const Batch<T>& b) {
    Var f = features(g, bind, b);
    auto s = g.scope(Category::head);
    return add_col_bias(g, matmul(g, f, bind(g, head_w_, true)), bind(g, head_b_, true));
  }

  /// Mean cross-entropy, recorded in the head category.
  Var loss(Graph<T>& g, Binder<T>& bind, const Batch<T>& b, std::vector<std::size_t> labels) {
    Var z = logits(g, bind, b);
    auto s = g.scope(Category::head);
    return cross_entropy(g, z, std::move(labels));
  }

  /// Every backbone tensor, for gradient-map checks.
  std::unordered_set<const Tensor<T>*> backbone_tensors() {
    std::unordered_set<const Tensor<T>*> out;
    weights().for_each([&](const std::string&, Tensor<T>& t) { out.insert(&t); });
    return out;
  }

  /// Number of scalars that actually receive updates.
  std::size_t trainable_scalars() {
    std::size_t n = head_w_.size() + head_b_.size();
    if (cfg_.strategy == Strategy::finetune) n += weights().parameter_count();
    for (std::size_t m = 0; m < queries_.layers(); ++m) {
      n += queries_.prompts[m].size() + prompts_.prompts[m].size();
      n += adapters_.down[m].size() + adapters_.up[m].size();
    }
    for (auto& t : agg_.within) n += t.size();
    n += agg_.across.size();
    for (auto& l : agg_.trans) l.for_each([&](const char*, Tensor<T>& t) { n += t.size(); });
    return n;
  }

 private:
  Var query_column(Graph<T>& g, Binder<T>& bind, std::size_t m, const LayerVars& lv, Var k, Var v,
                   const AdapterHook* hook) {
    Var p = bind(g, queries_.prompts[m], true);
    Var zp = query_branch(g, lv, k, v, p, config(), hook);
    Var wv;
    if (cfg_.aggregation.within == Within::weighted) {
      std::size_t slot = 0;
      for (std::size_t i = 0; i < m; ++i) slot += queries_.active[i];
      wv = bind(g, agg_.within[slot], true);
    }
    return aggregate_within(g, zp, cfg_.aggregation, wv);
  }

  const ViTWeights<T>* base_;
  std::optional<ViTWeights<T>> tuned_;
  StrategyConfig cfg_;
  std::size_t classes_;
  std::vector<bool> mask_;
  QueryTokenSet<T> queries_;
  PromptSet<T> prompts_;
  AdapterWeights<T> adapters_;
  AggregatorWeights<T> agg_;
  Tensor<T> head_w_, head_b_;
};

/// K, V of the query-carrying layers and the final CLS for every sample,
/// computed once by the frozen backbone in batches.
template <typename T>
FeatureCache<T> build_cache(const ViTWeights<T>& backbone, const Dataset<T>& data, const std::vector<bool>& layers,
                            std::size_t batch = 64) {
  auto& w = const_cast<ViTWeights<T>&>(backbone);
  const ViTConfig& c = w.config;
  const std::size_t n = data.size();
  FeatureCache<T> cache;
  cache.layers = layers;
  cache.k.resize(c.layers);
  cache.v.resize(c.layers);
  for (std::size_t m = 0; m < c.layers; ++m)
    if (layers[m]) {
      cache.k[m] = Tensor<T>({n, c.dim, c.tokens()});
      cache.v[m] = Tensor<T>({n, c.dim, c.tokens()});
    }
  cache.cls = Tensor<T>({n, c.dim});
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t B = std::min(batch, n - s);
    std::vector<std::size_t> idx(B);
    std::iota(idx.begin(), idx.end(), s);
    Graph<T> g;
    typename Graph<T>::NoGrad off(g);
    Binder<T> bind;
    Var z = embed_patches(g, bind_embedding(g, w, false, bind),
                          g.constant(patchify(gather_leading(data.images, idx), c.patch_size)));
    for (std::size_t m = 0; m < c.layers; ++m) {
      LayerTrace tr = layer_forward(g, bind_layer(g, w.layers[m], false, bind), z, c);
      if (layers[m]) {
        const std::size_t per = c.dim * c.tokens();
        std::copy_n(g.value(tr.k).data(), B * per, cache.k[m].data() + s * per);
        std::copy_n(g.value(tr.v).data(), B * per, cache.v[m].data() + s * per);
      }
      z = tr.output;
    }
    std::copy_n(g.value(cls_vector(g, z)).data(), B * c.dim, cache.cls.data() + s * c.dim);
  }
  return cache;
}

}  // namespace vqt
