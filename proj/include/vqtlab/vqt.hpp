// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vqtlab/serialize.hpp"
#include "vqtlab/vit.hpp"

namespace vqt {

/// Which layers carry tokens: "all" or "last:k".
inline std::vector<bool> parse_layer_mask(const std::string& spec, std::size_t layers) {
  if (spec == "all") return std::vector<bool>(layers, true);
  if (spec.rfind("last:", 0) == 0) {
    std::size_t k = 0;
    try {
      std::size_t used = 0;
      k = std::stoul(spec.substr(5), &used);
      if (used != spec.size() - 5) throw std::invalid_argument(spec);
    } catch (const std::exception&) {
      throw ConfigError("bad layer selection '" + spec + "'");
    }
    if (k > layers) throw ConfigError("layer selection '" + spec + "' exceeds " + std::to_string(layers) + " layers");
    std::vector<bool> m(layers, false);
    for (std::size_t i = layers - k; i < layers; ++i) m[i] = true;
    return m;
  }
  throw ConfigError("bad layer selection '" + spec + "' (expected all or last:k)");
}

inline std::size_t count_active(const std::vector<bool>& mask) {
  std::size_t n = 0;
  for (bool b : mask) n += b;
  return n;
}

/// Per-layer learnable query tokens. prompts[m] feeds layer m (0-based) and is
/// an empty tensor on inactive layers.
template <typename T>
struct QueryTokenSet {
  std::size_t tokens = 0;
  std::vector<Tensor<T>> prompts;
  std::vector<bool> active;

  std::size_t layers() const { return prompts.size(); }
  std::size_t active_count() const { return count_active(active); }

  static QueryTokenSet random(const ViTConfig& c, std::size_t t, std::vector<bool> mask, std::uint64_t seed) {
    if (mask.size() != c.layers) throw ContractError("layer mask length must equal layer count");
    QueryTokenSet q;
    q.tokens = t;
    q.active = std::move(mask);
    if (t == 0) q.active.assign(c.layers, false);
    Rng rng(seed);
    const double r = fan_bound(c.dim, c.dim);
    for (std::size_t m = 0; m < c.layers; ++m) {
      q.prompts.push_back(q.active[m] ? uniform_tensor<T>({c.dim, t}, r, rng) : Tensor<T>());
    }
    return q;
  }

  void validate(const ViTConfig& c) const {
    if (prompts.size() != c.layers || active.size() != c.layers) {
      throw ContractError("query token set has " + std::to_string(prompts.size()) + " layers, backbone has " +
                          std::to_string(c.layers));
    }
    for (std::size_t m = 0; m < c.layers; ++m) {
      if (!active[m]) continue;
      if (tokens == 0 || prompts[m].shape() != Shape{c.dim, tokens}) {
        throw DimensionError("query tokens of layer " + std::to_string(m) + " have shape " +
                             to_string(prompts[m].shape()));
      }
      if (!prompts[m].all_finite()) throw NumericalError("non-finite query token in layer " + std::to_string(m));
    }
  }
};

/// Query column through layer `lv`: attention of Q' over the given K, V,
/// then the column-wise tail with the tokens as residual input.
/// `p` is [D, T] and is broadcast when k is batched.
template <typename T>
Var query_branch(Graph<T>& g, const LayerVars& lv, Var k, Var v, Var p, const ViTConfig& c,
                 const AdapterHook* adapter = nullptr, Var* attn_out = nullptr) {
  const Shape ks = g.shape(k);
  if (ks.size() == 3 && g.shape(p).size() == 2) p = broadcast_batch(g, p, ks[0]);
  Var q = project_query(g, lv, p, c);
  Var a = attention(g, q, k, v, c.effective_heads(), attention_scale<T>(c));
  if (attn_out) *attn_out = a;
  return column_tail(g, lv, p, a, c, adapter);
}

/// Z' [.., D, T] -> [B, D*T] (or [1, D*T]); element (d, t) lands at d*T + t.
template <typename T>
Var flatten_tokens(Graph<T>& g, Var z) {
  const Shape s = g.shape(z);
  if (s.size() == 3) return reshape(g, z, {s[0], s[1] * s[2]});
  return reshape(g, z, {1, s[0] * s[1]});
}

template <typename T>
struct VqtLayerResult {
  Tensor<T> z_next;
  Tensor<T> z_prime;
  Tensor<T> attn;  // query-column attention output before the tail
};

template <typename T>
VqtLayerResult<T> vqt_layer_forward(const Tensor<T>& z_prev, const Tensor<T>& p_prev, LayerWeights<T>& lw,
                                    const ViTConfig& c) {
  if (p_prev.rank() != 2 || p_prev.rows() != c.dim) {
    throw DimensionError("query tokens must be [D, T], got " + to_string(p_prev.shape()));
  }
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  LayerVars lv = bind_layer(g, lw, false, bind);
  LayerTrace tr = layer_forward(g, lv, g.constant(z_prev), c);
  Var a;
  Var zp;
  {
    auto s = g.scope(Category::query_branch);
    zp = query_branch(g, lv, tr.k, tr.v, g.constant(p_prev), c, nullptr, &a);
  }
  return {g.value(tr.output), g.value(zp), g.value(a)};
}

template <typename T>
struct FeatureBundle {
  std::vector<Tensor<T>> z_prime;  // per layer [D, T]; empty on inactive layers
  Tensor<T> cls;                   // [D]
  Tensor<T> flat;                  // [|active|*D*T + D]
};

/// Runs the backbone with queries attached and gathers the summarized features.
template <typename T>
FeatureBundle<T> collect_features(const Tensor<T>& image, ViTWeights<T>& w, QueryTokenSet<T>& q) {
  q.validate(w.config);
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  const ViTConfig& c = w.config;
  Var z = embed_patches(g, bind_embedding(g, w, false, bind), g.constant(patchify(image, c.patch_size)));
  FeatureBundle<T> out;
  std::vector<Var> parts;
  for (std::size_t m = 0; m < c.layers; ++m) {
    LayerVars lv = bind_layer(g, w.layers[m], false, bind);
    LayerTrace tr = layer_forward(g, lv, z, c);
    if (q.active[m]) {
      auto s = g.scope(Category::query_branch, static_cast<int>(m));
      Var zp = query_branch(g, lv, tr.k, tr.v, g.constant(q.prompts[m]), c);
      out.z_prime.push_back(g.value(zp));
      parts.push_back(flatten_tokens(g, zp));
    } else {
      out.z_prime.emplace_back();
    }
    z = tr.output;
  }
  Var cls = cls_vector(g, z);
  out.cls = g.value(cls);
  parts.push_back(reshape(g, cls, {1, c.dim}));
  Var flat = concat_cols(g, parts);
  out.flat = g.value(flat).reshaped({g.value(flat).size()});
  return out;
}

/// Query tokens plus the classifier rows that read them.
inline std::size_t vqt_param_count(std::size_t dim, std::size_t layers, std::size_t tokens, std::size_t classes) {
  return tokens * dim * layers + tokens * dim * layers * classes;
}

// QTOK trailer: "QTOK" | M | T | per layer: active flag, then the [D, T]
// tensor record when active.
template <typename T>
void write_query_tokens(io::Writer& w, const QueryTokenSet<T>& q) {
  w.tag("QTOK");
  w.u32(static_cast<std::uint32_t>(q.layers()));
  w.u32(static_cast<std::uint32_t>(q.tokens));
  for (std::size_t m = 0; m < q.layers(); ++m) {
    w.u32(q.active[m] ? 1u : 0u);
    if (q.active[m]) w.tensor(q.prompts[m]);
  }
}

template <typename T>
QueryTokenSet<T> read_query_tokens(io::Reader& r, const ViTConfig& c) {
  if (r.tag("trailer tag") != "QTOK") throw FormatError("trailer tag: expected QTOK");
  QueryTokenSet<T> q;
  const std::uint32_t layers = r.u32("QTOK.layers");
  if (layers != c.layers) {
    throw FormatError("QTOK.layers: stored " + std::to_string(layers) + ", backbone has " + std::to_string(c.layers));
  }
  q.tokens = r.u32("QTOK.T");
  for (std::size_t m = 0; m < layers; ++m) {
    const std::string name = "queries.layer" + std::to_string(m);
    const std::uint32_t flag = r.u32(name + ".active");
    if (flag > 1) throw FormatError(name + ".active: bad flag");
    q.active.push_back(flag == 1);
    q.prompts.push_back(flag ? r.tensor<T>(name, {c.dim, q.tokens}) : Tensor<T>());
  }
  return q;
}

template <typename T>
void save_weights(ViTWeights<T>& weights, const QueryTokenSet<T>& q, const std::string& path) {
  io::Writer w;
  write_weights(w, weights);
  write_query_tokens(w, q);
  w.write_file(path);
}

/// Weights plus the optional query-token trailer.
template <typename T>
std::pair<ViTWeights<T>, std::optional<QueryTokenSet<T>>> load_weights_and_queries(const std::string& path) {
  io::Reader r = io::Reader::from_file(path);
  auto w = read_weights<T>(r);
  std::optional<QueryTokenSet<T>> q;
  if (!r.at_end()) q = read_query_tokens<T>(r, w.config);
  if (!r.at_end()) throw FormatError("trailing bytes after QTOK section");
  return {std::move(w), std::move(q)};
}

}  // namespace vqt
