// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vqtlab/autodiff.hpp"
#include "vqtlab/random.hpp"

namespace vqt {

/// `paper`: single head, no layer norm, no residual, no output projection.
/// `full`: pre-LN multi-head layer with residuals, as in common ViTs.
enum class Mode : std::uint32_t { paper = 0, full = 1 };

struct ViTConfig {
  std::size_t dim = 16;
  std::size_t layers = 4;
  std::size_t heads = 2;
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t mlp_ratio = 2;
  Mode mode = Mode::full;

  std::size_t patches() const {
    const std::size_t side = image_size / patch_size;
    return side * side;
  }
  std::size_t tokens() const { return 1 + patches(); }
  std::size_t hidden() const { return dim * mlp_ratio; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t effective_heads() const { return mode == Mode::paper ? 1 : heads; }
  std::size_t head_dim() const { return dim / effective_heads(); }

  void validate() const {
    if (dim < 2 || heads == 0 || patch_size == 0 || image_size == 0 || channels == 0 || mlp_ratio == 0) {
      throw ContractError("ViT config extents must be positive (dim >= 2)");
    }
    if (dim % heads != 0) throw ContractError("head count must divide the embedding dimension");
    if (image_size % patch_size != 0) throw DimensionError("image size must be a multiple of the patch size");
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;

  /// Desk-scale instance used by the test and acceptance suites.
  static ViTConfig tiny(Mode mode = Mode::full) {
    ViTConfig c;
    c.mode = mode;
    return c;
  }

  /// ViT-B/16 at 224x224.
  static ViTConfig vit_b() {
    ViTConfig c;
    c.dim = 768;
    c.layers = 12;
    c.heads = 12;
    c.image_size = 224;
    c.patch_size = 16;
    c.mlp_ratio = 4;
    return c;
  }
};

template <typename T>
struct LayerWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv;
  Tensor<T> wo, bo;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w1, b1, w2, b2;

  /// Visit tensors in the fixed serialization order.
  template <typename F>
  void for_each(F&& f) {
    f("ln1_g", ln1_g), f("ln1_b", ln1_b), f("wq", wq), f("bq", bq), f("wk", wk), f("bk", bk);
    f("wv", wv), f("bv", bv), f("wo", wo), f("bo", bo), f("ln2_g", ln2_g), f("ln2_b", ln2_b);
    f("w1", w1), f("b1", b1), f("w2", w2), f("b2", b2);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<LayerWeights*>(this)->for_each([&](const char* n, Tensor<T>& t) { f(n, static_cast<const Tensor<T>&>(t)); });
  }

  static std::vector<std::pair<std::string, Shape>> layout(const ViTConfig& c) {
    const std::size_t D = c.dim, H = c.hidden();
    return {{"ln1_g", {D}}, {"ln1_b", {D}}, {"wq", {D, D}}, {"bq", {D}},    {"wk", {D, D}}, {"bk", {D}},
            {"wv", {D, D}}, {"bv", {D}},    {"wo", {D, D}}, {"bo", {D}},    {"ln2_g", {D}}, {"ln2_b", {D}},
            {"w1", {H, D}}, {"b1", {H}},    {"w2", {D, H}}, {"b2", {D}}};
  }

  static LayerWeights random(const ViTConfig& c, Rng& rng) {
    const std::size_t D = c.dim, H = c.hidden();
    LayerWeights w;
    w.ln1_g = Tensor<T>({D}, T(1));
    w.ln1_b = Tensor<T>({D});
    const double rd = fan_bound(D, D);
    w.wq = uniform_tensor<T>({D, D}, rd, rng);
    w.bq = Tensor<T>({D});
    w.wk = uniform_tensor<T>({D, D}, rd, rng);
    w.bk = Tensor<T>({D});
    w.wv = uniform_tensor<T>({D, D}, rd, rng);
    w.bv = Tensor<T>({D});
    w.wo = uniform_tensor<T>({D, D}, rd, rng);
    w.bo = Tensor<T>({D});
    w.ln2_g = Tensor<T>({D}, T(1));
    w.ln2_b = Tensor<T>({D});
    w.w1 = uniform_tensor<T>({H, D}, fan_bound(D, H), rng);
    w.b1 = Tensor<T>({H});
    w.w2 = uniform_tensor<T>({D, H}, fan_bound(H, D), rng);
    w.b2 = Tensor<T>({D});
    return w;
  }
};

template <typename T>
struct ViTWeights {
  ViTConfig config;
  Tensor<T> patch_w;  // [D, C*p*p]
  Tensor<T> patch_b;  // [D]
  Tensor<T> cls;      // [D]
  Tensor<T> pos;      // [D, N]
  std::vector<LayerWeights<T>> layers;
  bool frozen = true;

  template <typename F>
  void for_each(F&& f) {
    f(std::string("patch_w"), patch_w);
    f(std::string("patch_b"), patch_b);
    f(std::string("cls"), cls);
    f(std::string("pos"), pos);
    for (std::size_t m = 0; m < layers.size(); ++m) {
      layers[m].for_each([&](const char* n, Tensor<T>& t) { f("layer" + std::to_string(m) + "." + n, t); });
    }
  }

  static std::vector<std::pair<std::string, Shape>> layout(const ViTConfig& c) {
    std::vector<std::pair<std::string, Shape>> out = {
        {"patch_w", {c.dim, c.patch_dim()}}, {"patch_b", {c.dim}}, {"cls", {c.dim}}, {"pos", {c.dim, c.patches()}}};
    for (std::size_t m = 0; m < c.layers; ++m)
      for (auto& [n, s] : LayerWeights<T>::layout(c)) out.emplace_back("layer" + std::to_string(m) + "." + n, s);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each([&](const std::string&, Tensor<T>& t) { n += t.size(); });
    return n;
  }

  static ViTWeights random(const ViTConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(seed);
    ViTWeights w;
    w.config = c;
    w.patch_w = uniform_tensor<T>({c.dim, c.patch_dim()}, fan_bound(c.patch_dim(), c.dim), rng);
    w.patch_b = Tensor<T>({c.dim});
    w.cls = normal_tensor<T>({c.dim}, 0.02, rng);
    w.pos = normal_tensor<T>({c.dim, c.patches()}, 0.02, rng);
    for (std::size_t m = 0; m < c.layers; ++m) w.layers.push_back(LayerWeights<T>::random(c, rng));
    return w;
  }

  template <typename U>
  ViTWeights<U> cast() const {
    ViTWeights<U> out;
    out.config = config;
    out.frozen = frozen;
    out.patch_w = patch_w.template cast<U>();
    out.patch_b = patch_b.template cast<U>();
    out.cls = cls.template cast<U>();
    out.pos = pos.template cast<U>();
    for (const auto& l : layers) {
      LayerWeights<U> lu;
      auto src = l;
      std::vector<Tensor<U>> converted;
      src.for_each([&](const char*, Tensor<T>& t) { converted.push_back(t.template cast<U>()); });
      std::size_t i = 0;
      lu.for_each([&](const char*, Tensor<U>& t) { t = std::move(converted[i++]); });
      out.layers.push_back(std::move(lu));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Graph binding
// ---------------------------------------------------------------------------

/// Collects trainable leaves so gradients can be routed back to storage.
template <typename T>
class Binder {
 public:
  struct Entry {
    Var var;
    Tensor<T>* tensor;
  };

  Var operator()(Graph<T>& g, Tensor<T>& t, bool trainable) {
    Var v = g.leaf(t, trainable);
    if (trainable && g.grad_enabled()) entries_.push_back({v, &t});
    return v;
  }

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

struct LayerVars {
  Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct EmbedVars {
  Var patch_w, patch_b, cls, pos;
};

template <typename T>
LayerVars bind_layer(Graph<T>& g, LayerWeights<T>& w, bool trainable, Binder<T>& bind) {
  LayerVars v;
  Var* slots[] = {&v.ln1_g, &v.ln1_b, &v.wq, &v.bq, &v.wk, &v.bk, &v.wv, &v.bv,
                  &v.wo,    &v.bo,    &v.ln2_g, &v.ln2_b, &v.w1, &v.b1, &v.w2, &v.b2};
  std::size_t i = 0;
  w.for_each([&](const char*, Tensor<T>& t) { *slots[i++] = bind(g, t, trainable); });
  return v;
}

template <typename T>
EmbedVars bind_embedding(Graph<T>& g, ViTWeights<T>& w, bool trainable, Binder<T>& bind) {
  return EmbedVars{bind(g, w.patch_w, trainable), bind(g, w.patch_b, trainable), bind(g, w.cls, trainable),
                   bind(g, w.pos, trainable)};
}

/// A bottleneck branch added to a layer's MLP output: out += s * up(gelu(down(x))),
/// where x is the MLP input.
struct AdapterHook {
  Var down;  // [d_hat, D]
  Var up;    // [D, d_hat]
  double scale = 0.1;
};

/// Per-layer values taken by Head2Toe-style taps and by the query branch.
struct LayerTrace {
  Var input;   // Z_{m-1}
  Var normed;  // after the first layer norm (the input itself in paper mode)
  Var k, v;    // key and value projections of every input token
  Var msa;     // MSA block output, before any residual add
  Var hidden;  // MLP hidden activations after GELU
  Var output;  // Z_m
};

// ---------------------------------------------------------------------------
// Layer math
// ---------------------------------------------------------------------------

/// Patch vectors for an image [C, H, W] -> [C*p*p, N], or a batch [B, C, H, W]
/// -> [B, C*p*p, N]. Within a patch the order is channel, row, column; patches
/// are numbered row-major over the grid.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3 && image.rank() != 4) throw DimensionError("image must be [C,H,W] or [B,C,H,W]");
  const bool batched = image.rank() == 4;
  const std::size_t B = batched ? image.shape()[0] : 1;
  const std::size_t C = image.extent(-3), H = image.extent(-2), W = image.extent(-1);
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw DimensionError("image " + to_string(image.shape()) + " not divisible into " + std::to_string(patch) +
                         "-pixel patches");
  }
  const std::size_t gh = H / patch, gw = W / patch, N = gh * gw, P = C * patch * patch;
  Tensor<T> out(batched ? Shape{B, P, N} : Shape{P, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const std::size_t n = py * gw + px;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t r = 0; r < patch; ++r)
            for (std::size_t s = 0; s < patch; ++s) {
              const std::size_t row = c * patch * patch + r * patch + s;
              out[(b * P + row) * N + n] = image[((b * C + c) * H + py * patch + r) * W + px * patch + s];
            }
      }
  return out;
}

/// Z0 = [cls | W_pe * patches + b_pe + pos].
template <typename T>
Var embed_patches(Graph<T>& g, const EmbedVars& e, Var patches) {
  const Shape ps = g.shape(patches);
  Var x = add_row_bias(g, matmul(g, e.patch_w, patches), e.patch_b);
  Var cls = reshape(g, e.cls, {g.shape(e.cls)[0], 1});
  Var pos = e.pos;
  if (ps.size() == 3) {
    cls = broadcast_batch(g, cls, ps[0]);
    pos = broadcast_batch(g, pos, ps[0]);
  }
  return concat_cols(g, {cls, add(g, x, pos)});
}

/// V * Softmax(K^T Q * scale) per head, heads stacked back along rows.
template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, std::size_t heads, T scale_factor) {
  const std::size_t D = g.shape(q)[g.shape(q).size() - 2];
  const std::size_t dh = D / heads;
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : slice_rows(g, q, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : slice_rows(g, k, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : slice_rows(g, v, h * dh, (h + 1) * dh);
    Var scores = scale(g, matmul(g, kh, qh, true), scale_factor);
    outs.push_back(matmul(g, vh, softmax_columns(g, scores)));
  }
  return concat_rows(g, outs);
}

template <typename T>
T attention_scale(const ViTConfig& c) {
  return T(1) / std::sqrt(static_cast<T>(c.mode == Mode::paper ? c.dim : c.head_dim()));
}

/// Query projection of arbitrary tokens through a layer.
template <typename T>
Var project_query(Graph<T>& g, const LayerVars& lv, Var tokens, const ViTConfig& c) {
  if (c.mode == Mode::paper) return matmul(g, lv.wq, tokens);
  return add_row_bias(g, matmul(g, lv.wq, layernorm(g, tokens, lv.ln1_g, lv.ln1_b)), lv.bq);
}

/// Everything after attention, applied column-wise: output projection,
/// residual, second norm and MLP (full mode) or the bare MLP (paper mode).
/// `msa` and `hidden` receive the MSA block output and the post-GELU hidden.
template <typename T>
Var column_tail(Graph<T>& g, const LayerVars& lv, Var residual, Var attn, const ViTConfig& c,
                const AdapterHook* adapter, Var* msa = nullptr, Var* hidden = nullptr) {
  Var mlp_in, x1;
  if (c.mode == Mode::paper) {
    if (msa) *msa = attn;
    mlp_in = attn;
  } else {
    Var o = add_row_bias(g, matmul(g, lv.wo, attn), lv.bo);
    if (msa) *msa = o;
    x1 = add(g, residual, o);
    mlp_in = layernorm(g, x1, lv.ln2_g, lv.ln2_b);
  }
  Var h = gelu(g, add_row_bias(g, matmul(g, lv.w1, mlp_in), lv.b1));
  if (hidden) *hidden = h;
  Var m = add_row_bias(g, matmul(g, lv.w2, h), lv.b2);
  if (adapter) {
    const Category cat =
        g.current_category() == Category::backbone_main ? Category::adapter : g.current_category();
    auto s = g.scope(cat, g.current_layer());
    Var branch = matmul(g, adapter->up, gelu(g, matmul(g, adapter->down, mlp_in)));
    m = add(g, m, scale(g, branch, static_cast<T>(adapter->scale)));
  }
  return c.mode == Mode::paper ? m : add(g, x1, m);
}

/// One transformer layer over token columns z [.., D, n].
template <typename T>
LayerTrace layer_forward(Graph<T>& g, const LayerVars& lv, Var z, const ViTConfig& c,
                         const AdapterHook* adapter = nullptr) {
  LayerTrace tr;
  tr.input = z;
  Var q;
  if (c.mode == Mode::paper) {
    tr.normed = z;
    q = matmul(g, lv.wq, z);
    tr.k = matmul(g, lv.wk, z);
    tr.v = matmul(g, lv.wv, z);
  } else {
    tr.normed = layernorm(g, z, lv.ln1_g, lv.ln1_b);
    q = add_row_bias(g, matmul(g, lv.wq, tr.normed), lv.bq);
    tr.k = add_row_bias(g, matmul(g, lv.wk, tr.normed), lv.bk);
    tr.v = add_row_bias(g, matmul(g, lv.wv, tr.normed), lv.bv);
  }
  Var a = attention(g, q, tr.k, tr.v, c.effective_heads(), attention_scale<T>(c));
  tr.output = column_tail(g, lv, z, a, c, adapter, &tr.msa, &tr.hidden);
  return tr;
}

/// CLS column of Z as a [.., D] vector.
template <typename T>
Var cls_vector(Graph<T>& g, Var z) {
  const Shape s = g.shape(z);
  Var col = slice_cols(g, z, 0, 1);
  return s.size() == 3 ? reshape(g, col, {s[0], s[1]}) : reshape(g, col, {s[0]});
}

// ---------------------------------------------------------------------------
// Tensor-level conveniences (gradient-free)
// ---------------------------------------------------------------------------

template <typename T>
struct LayerTraceValues {
  Tensor<T> input, normed, k, v, msa, hidden, output;
};

template <typename T>
LayerTraceValues<T> trace_values(const Graph<T>& g, const LayerTrace& tr) {
  return {g.value(tr.input), g.value(tr.normed), g.value(tr.k),     g.value(tr.v),
          g.value(tr.msa),   g.value(tr.hidden), g.value(tr.output)};
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, ViTWeights<T>& w) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  EmbedVars e = bind_embedding(g, w, false, bind);
  return g.value(embed_patches(g, e, g.constant(patchify(image, w.config.patch_size))));
}

template <typename T>
struct LayerResult {
  Tensor<T> z_next;
  LayerTraceValues<T> trace;
};

template <typename T>
LayerResult<T> layer_forward(const Tensor<T>& z_prev, LayerWeights<T>& lw, const ViTConfig& c) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  LayerVars lv = bind_layer(g, lw, false, bind);
  LayerTrace tr = layer_forward(g, lv, g.constant(z_prev), c);
  return {g.value(tr.output), trace_values(g, tr)};
}

template <typename T>
struct ForwardResult {
  std::vector<Tensor<T>> zs;  // Z_0 .. Z_M
  Tensor<T> cls;              // x_M^(Class)
  std::vector<LayerTraceValues<T>> traces;
};

template <typename T>
ForwardResult<T> forward(const Tensor<T>& z0, ViTWeights<T>& w) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Binder<T> bind;
  ForwardResult<T> out;
  Var z = g.constant(z0);
  out.zs.push_back(z0);
  for (std::size_t m = 0; m < w.layers.size(); ++m) {
    auto ls = g.layer_scope(static_cast<int>(m));
    LayerVars lv = bind_layer(g, w.layers[m], false, bind);
    LayerTrace tr = layer_forward(g, lv, z, w.config);
    out.traces.push_back(trace_values(g, tr));
    z = tr.output;
    out.zs.push_back(g.value(z));
  }
  out.cls = g.value(cls_vector(g, z));
  return out;
}

}  // namespace vqt
