// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "vqtlab/vqt.hpp"

namespace vqt {

// ---------------------------------------------------------------------------
// VPT-Deep
// ---------------------------------------------------------------------------

/// Per-layer prompts; same storage as query tokens but consumed as full
/// input tokens (they produce keys and values too).
template <typename T>
struct PromptSet : QueryTokenSet<T> {
  static PromptSet random(const ViTConfig& c, std::size_t t, std::vector<bool> mask, std::uint64_t seed) {
    PromptSet p;
    static_cast<QueryTokenSet<T>&>(p) = QueryTokenSet<T>::random(c, t, std::move(mask), seed);
    return p;
  }
};

/// Layer over [Z | P]; prompt output columns are dropped. The returned trace
/// has output, k and v restricted to the original columns; the other fields
/// span all n + T columns. An invalid `prompt` runs the plain layer.
template <typename T>
LayerTrace vpt_layer(Graph<T>& g, const LayerVars& lv, Var z, Var prompt, const ViTConfig& c,
                     const AdapterHook* adapter = nullptr) {
  if (!prompt.valid()) return layer_forward(g, lv, z, c, adapter);
  const Shape zs = g.shape(z);
  const std::size_t n = zs.back();
  Var zin;
  {
    auto s = g.scope(Category::prompt_branch, g.current_layer());
    Var p = zs.size() == 3 ? broadcast_batch(g, prompt, zs[0]) : prompt;
    zin = concat_cols(g, {z, p});
  }
  LayerTrace tr = layer_forward(g, lv, zin, c, adapter);
  tr.input = z;
  tr.output = slice_cols(g, tr.output, 0, n);
  tr.k = slice_cols(g, tr.k, 0, n);
  tr.v = slice_cols(g, tr.v, 0, n);
  return tr;
}

/// Gradient-free single layer; an empty prompt tensor means T = 0.
template <typename T>
Tensor<T> vpt_layer_forward(const Tensor<T>& z_prev, const Tensor<T>& prompt, LayerWeights<T>& lw,
                            const ViTConfig& c) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  LayerVars lv = bind_layer(g, lw, false, bind);
  Var p = prompt.empty() ? Var{} : g.constant(prompt);
  return g.value(vpt_layer(g, lv, g.constant(z_prev), p, c).output);
}

// ---------------------------------------------------------------------------
// AdaptFormer
// ---------------------------------------------------------------------------

template <typename T>
struct AdapterWeights {
  std::size_t bottleneck = 64;
  double scale = 0.1;
  std::vector<Tensor<T>> down;  // [d_hat, D]; empty when inactive
  std::vector<Tensor<T>> up;    // [D, d_hat]
  std::vector<bool> active;

  std::size_t active_count() const { return count_active(active); }

  /// Down-projection uniform fan-based, up-projection zero, so a fresh
  /// adapter leaves the backbone function unchanged.
  static AdapterWeights random(const ViTConfig& c, std::size_t d_hat, double s, std::vector<bool> mask,
                               std::uint64_t seed) {
    if (d_hat == 0) throw ContractError("adapter bottleneck must be at least 1");
    if (mask.size() != c.layers) throw ContractError("layer mask length must equal layer count");
    AdapterWeights a;
    a.bottleneck = d_hat;
    a.scale = s;
    a.active = std::move(mask);
    Rng rng(seed);
    for (std::size_t m = 0; m < c.layers; ++m) {
      if (a.active[m]) {
        a.down.push_back(uniform_tensor<T>({d_hat, c.dim}, fan_bound(c.dim, d_hat), rng));
        a.up.push_back(Tensor<T>({c.dim, d_hat}));
      } else {
        a.down.emplace_back();
        a.up.emplace_back();
      }
    }
    return a;
  }
};

inline std::size_t adapter_param_count(std::size_t dim, std::size_t active_layers, std::size_t d_hat) {
  return d_hat * 2 * dim * active_layers;
}

template <typename T>
Tensor<T> adaptformer_layer_forward(const Tensor<T>& z_prev, LayerWeights<T>& lw, Tensor<T>& down, Tensor<T>& up,
                                    double s, const ViTConfig& c) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  LayerVars lv = bind_layer(g, lw, false, bind);
  AdapterHook hook{g.constant(down), g.constant(up), s};
  return g.value(layer_forward(g, lv, g.constant(z_prev), c, &hook).output);
}

// ---------------------------------------------------------------------------
// Head2Toe
// ---------------------------------------------------------------------------

/// Taps in TapVector order. `embedding` is Z0 and appears once; the other
/// four repeat per layer (post-MLP of layer m is the next layer's input).
enum class Tap : std::size_t { embedding, normed, msa, hidden, output };
inline constexpr std::size_t kTapCount = 5;

struct Pooling {
  std::size_t window = 1;
  std::size_t stride = 1;

  /// Group g averages columns [g*stride, min(g*stride + window, n)).
  std::size_t groups(std::size_t n) const { return (n + stride - 1) / stride; }
};

struct PoolingPlan {
  std::array<Pooling, kTapCount> taps{};

  void validate() const {
    for (const auto& p : taps)
      if (p.window == 0 || p.stride == 0) throw ContractError("pooling window and stride must be positive");
  }

  static PoolingPlan uniform(std::size_t window, std::size_t stride) {
    PoolingPlan p;
    p.taps.fill({window, stride});
    return p;
  }

  /// Three dimension regimes, sized against ViT-B (197 tokens): about 68K,
  /// 815K and 1.8M features.
  static PoolingPlan preset(const std::string& name) {
    PoolingPlan p;
    if (name == "68k") {
      p.taps.fill({197, 197});
      p.taps[static_cast<std::size_t>(Tap::embedding)] = {50, 50};
    } else if (name == "815k") {
      p.taps.fill({17, 17});
      p.taps[static_cast<std::size_t>(Tap::hidden)] = {16, 16};
    } else if (name == "1.8m") {
      p.taps.fill({8, 8});
      p.taps[static_cast<std::size_t>(Tap::hidden)] = {7, 7};
    } else {
      throw ConfigError("unknown pooling preset '" + name + "' (68k, 815k, 1.8m)");
    }
    return p;
  }

  std::size_t dimension(const ViTConfig& c) const {
    const std::size_t n = c.tokens();
    auto g = [&](Tap t) { return taps[static_cast<std::size_t>(t)].groups(n); };
    const std::size_t per_layer =
        c.dim * g(Tap::normed) + c.dim * g(Tap::msa) + c.hidden() * g(Tap::hidden) + c.dim * g(Tap::output);
    return c.dim * g(Tap::embedding) + c.layers * per_layer;
  }
};

/// Column-averaging matrix [n, groups] for one pooling rule.
template <typename T>
Tensor<T> pooling_matrix(std::size_t n, const Pooling& p) {
  const std::size_t groups = p.groups(n);
  Tensor<T> P({n, groups});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t lo = gi * p.stride, hi = std::min(lo + p.window, n);
    for (std::size_t j = lo; j < hi; ++j) P.at(j, gi) = T(1) / static_cast<T>(hi - lo);
  }
  return P;
}

/// Pools x [.., R, n] -> [B, R*groups] (row-major over R x groups).
template <typename T>
Var pool_tap(Graph<T>& g, Var x, const Pooling& p) {
  const Shape s = g.shape(x);
  const std::size_t n = s.back(), R = s[s.size() - 2];
  Var pooled = matmul(g, x, g.constant(pooling_matrix<T>(n, p)));
  const std::size_t B = s.size() == 3 ? s[0] : 1;
  return reshape(g, pooled, {B, R * p.groups(n)});
}

/// TapVector for a batch: [B, plan.dimension()] with layout
/// Z0 tap, then per layer (normed, msa, hidden, output).
template <typename T>
Var head2toe_features(Graph<T>& g, const std::vector<LayerTrace>& traces, Var z0, const PoolingPlan& plan) {
  plan.validate();
  auto at = [&](Tap t) { return plan.taps[static_cast<std::size_t>(t)]; };
  std::vector<Var> parts{pool_tap(g, z0, at(Tap::embedding))};
  for (const auto& tr : traces) {
    parts.push_back(pool_tap(g, tr.normed, at(Tap::normed)));
    parts.push_back(pool_tap(g, tr.msa, at(Tap::msa)));
    parts.push_back(pool_tap(g, tr.hidden, at(Tap::hidden)));
    parts.push_back(pool_tap(g, tr.output, at(Tap::output)));
  }
  return concat_cols(g, parts);
}

/// Pooled taps of one image through the frozen backbone.
template <typename T>
Tensor<T> head2toe_features(const Tensor<T>& image, ViTWeights<T>& w, const PoolingPlan& plan) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  Var z0 = embed_patches(g, bind_embedding(g, w, false, bind), g.constant(patchify(image, w.config.patch_size)));
  std::vector<LayerTrace> traces;
  Var z = z0;
  for (auto& lw : w.layers) {
    traces.push_back(layer_forward(g, bind_layer(g, lw, false, bind), z, w.config));
    z = traces.back().output;
  }
  const Tensor<T>& f = g.value(head2toe_features(g, traces, z0, plan));
  return f.reshaped({f.size()});
}

}  // namespace vqt
