// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation on an explicit tape.
//
// Every recorded op declares, per parent, which values its backward reads.
// A value is retained for backward only when some grad-requiring consumer
// declared a read of it, and backward may read nothing else: `Graph::saved`
// refuses unretained activations. The retained-byte totals are therefore an
// exact account of what differentiation keeps alive, broken down by the
// category active when the reading op was recorded.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vqtlab/errors.hpp"
#include "vqtlab/tensor.hpp"

namespace vqt {

enum class Category : std::uint8_t { backbone_main, query_branch, prompt_branch, adapter, head };
inline constexpr std::size_t kCategoryCount = 5;

inline std::string_view category_name(Category c) {
  switch (c) {
    case Category::backbone_main: return "backbone_main";
    case Category::query_branch: return "query_branch";
    case Category::prompt_branch: return "prompt_branch";
    case Category::adapter: return "adapter";
    case Category::head: return "head";
  }
  return "?";
}

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  scale,
  add_row_bias,
  add_col_bias,
  softmax_columns,
  layernorm,
  gelu,
  slice_cols,
  concat_cols,
  slice_rows,
  concat_rows,
  mean_cols,
  reshape,
  broadcast_batch,
  weighted_sum,
  cross_entropy,
  sum,
};

inline std::string_view op_name(OpKind k) {
  static constexpr std::array<std::string_view, 20> names = {
      "leaf",        "matmul",      "add",        "mul",         "scale",           "add_row_bias",
      "add_col_bias", "softmax_columns", "layernorm", "gelu",     "slice_cols",      "concat_cols",
      "slice_rows",  "concat_rows", "mean_cols",  "reshape",     "broadcast_batch", "weighted_sum",
      "cross_entropy", "sum"};
  return names[static_cast<std::size_t>(k)];
}

/// Handle to a node on a Graph.
struct Var {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t id = npos;
  bool valid() const { return id != npos; }
  friend bool operator==(Var, Var) = default;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self, const Tensor<T>& grad_out)>;
  /// Slot meaning "this node's own output" in a read declaration.
  static constexpr int kSelf = -1;
  /// reads[i] lists the value slots the gradient w.r.t. parent i needs.
  using Reads = std::vector<std::vector<int>>;

  struct Node {
    OpKind op = OpKind::leaf;
    std::vector<std::size_t> parents;
    Shape shape;
    bool requires_grad = false;
    bool is_leaf = false;
    Category category = Category::backbone_main;
    int layer = -1;
    Tensor<T> value;
    bool released = false;
    bool retained = false;
    Category charged_to = Category::backbone_main;
    BackwardFn backward;
  };

  class Scope {
   public:
    Scope(Graph& g, Category c, int layer) : g_(&g), prev_c_(g.category_), prev_l_(g.layer_) {
      g.category_ = c;
      g.layer_ = layer;
    }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope() {
      g_->category_ = prev_c_;
      g_->layer_ = prev_l_;
    }

   private:
    Graph* g_;
    Category prev_c_;
    int prev_l_;
  };

  class NoGrad {
   public:
    explicit NoGrad(Graph& g) : g_(&g), prev_(g.grad_enabled_) { g.grad_enabled_ = false; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
    ~NoGrad() { g_->grad_enabled_ = prev_; }

   private:
    Graph* g_;
    bool prev_;
  };

  [[nodiscard]] Scope scope(Category c, int layer = -1) { return Scope(*this, c, layer); }
  [[nodiscard]] Scope layer_scope(int layer) { return Scope(*this, category_, layer); }
  Category current_category() const { return category_; }
  int current_layer() const { return layer_; }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    if (!value.all_finite()) throw NumericalError("non-finite value in leaf tensor");
    Node n;
    n.op = OpKind::leaf;
    n.shape = value.shape();
    n.requires_grad = requires_grad && grad_enabled_;
    n.is_leaf = true;
    n.category = category_;
    n.layer = layer_;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Append an op node. Used by the op library; rarely needed directly.
  Var record(OpKind op, const std::vector<Var>& parents, Tensor<T> value, const Reads& reads, BackwardFn fn) {
    if (!value.all_finite()) {
      throw NumericalError("non-finite output from " + std::string(op_name(op)) + " (shape " +
                           to_string(value.shape()) + ")");
    }
    Node n;
    n.op = op;
    n.shape = value.shape();
    n.category = category_;
    n.layer = layer_;
    n.value = std::move(value);
    n.parents.reserve(parents.size());
    bool any = false;
    for (Var p : parents) {
      check(p);
      n.parents.push_back(p.id);
      any = any || nodes_[p.id].requires_grad;
    }
    n.requires_grad = grad_enabled_ && any;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    const std::size_t self = nodes_.size() - 1;
    if (nodes_[self].requires_grad) {
      const Node& me = nodes_[self];
      for (std::size_t i = 0; i < me.parents.size() && i < reads.size(); ++i) {
        if (!nodes_[me.parents[i]].requires_grad) continue;
        for (int slot : reads[i]) {
          retain(slot == kSelf ? self : me.parents[static_cast<std::size_t>(slot)], category_);
        }
      }
    }
    return Var{self};
  }

  const Tensor<T>& value(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    if (n.released) throw ContractError("value of node " + std::to_string(v.id) + " was released");
    return n.value;
  }

  const Shape& shape(Var v) const {
    check(v);
    return nodes_[v.id].shape;
  }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }

  const Node& node(Var v) const {
    check(v);
    return nodes_[v.id];
  }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Run reverse accumulation from a scalar loss.
  void backward(Var loss) {
    check(loss);
    if (numel(nodes_[loss.id].shape) != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + to_string(nodes_[loss.id].shape));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    closure_.assign(nodes_.size(), false);
    reads_log_.clear();
    std::vector<char> ancestor(nodes_.size(), 0);
    ancestor[loss.id] = 1;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!ancestor[i]) continue;
      for (auto p : nodes_[i].parents) ancestor[p] = 1;
      closure_[i] = nodes_[i].requires_grad;
    }
    if (!closure_[loss.id]) return;
    grads_[loss.id] = Tensor<T>(nodes_[loss.id].shape, T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!closure_[i] || nodes_[i].is_leaf || !grads_[i]) continue;
      nodes_[i].backward(*this, i, *grads_[i]);
    }
  }

  const Tensor<T>* grad(Var v) const {
    check(v);
    if (v.id >= grads_.size() || !grads_[v.id]) return nullptr;
    return &*grads_[v.id];
  }
  bool has_grad(Var v) const { return grad(v) != nullptr; }

  /// Ids of every node that received a gradient in the last backward.
  std::vector<std::size_t> nodes_with_grad() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < grads_.size(); ++i)
      if (grads_[i]) out.push_back(i);
    return out;
  }

  bool wants_grad(std::size_t id) const { return id < closure_.size() && closure_[id]; }

  /// Backward-time read of a value; only leaves and retained activations.
  const Tensor<T>& saved(std::size_t id) {
    const Node& n = nodes_.at(id);
    if (!n.is_leaf && !n.retained) {
      throw ContractError("backward of a consumer read node " + std::to_string(id) + " (" +
                          std::string(op_name(n.op)) + ") that was not retained");
    }
    if (n.released) throw ContractError("backward read a released value");
    reads_log_.insert(id);
    return n.value;
  }

  void accumulate(std::size_t id, Tensor<T> g) {
    if (!wants_grad(id)) return;
    auto& slot = grads_[id];
    if (slot) {
      *slot += g;
    } else {
      g.require_same_shape(Tensor<T>(nodes_[id].shape), "gradient");
      slot = std::move(g);
    }
  }

  /// Drop every activation that backward will not read.
  void release_unretained() {
    for (auto& n : nodes_) {
      if (n.is_leaf || n.retained) continue;
      n.value = Tensor<T>();
      n.released = true;
    }
  }

  // ---- accounting ----

  std::size_t activation_bytes(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return (!n.is_leaf && n.retained) ? numel(n.shape) * sizeof(T) : 0;
  }
  std::size_t grad_buffer_bytes(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.requires_grad ? numel(n.shape) * sizeof(T) : 0;
  }
  /// Retained activation plus gradient buffer for one node.
  std::size_t retained_bytes(Var v) const {
    check(v);
    return activation_bytes(v.id) + grad_buffer_bytes(v.id);
  }

  std::array<std::size_t, kCategoryCount> retained_by_category() const {
    std::array<std::size_t, kCategoryCount> out{};
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      out[static_cast<std::size_t>(nodes_[i].charged_to)] += activation_bytes(i);
      out[static_cast<std::size_t>(nodes_[i].category)] += grad_buffer_bytes(i);
    }
    return out;
  }

  std::size_t total_retained() const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) s += activation_bytes(i) + grad_buffer_bytes(i);
    return s;
  }

  std::size_t total_activation_bytes() const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) s += activation_bytes(i);
    return s;
  }

  /// Bytes of non-leaf values actually read by the last backward.
  std::size_t bytes_read_in_backward() const {
    std::size_t s = 0;
    for (auto id : reads_log_)
      if (!nodes_[id].is_leaf) s += numel(nodes_[id].shape) * sizeof(T);
    return s;
  }

 private:
  void check(Var v) const {
    if (v.id >= nodes_.size()) throw ContractError("variable does not belong to this graph");
  }

  void retain(std::size_t id, Category reader) {
    Node& n = nodes_[id];
    if (n.is_leaf || n.retained) return;
    n.retained = true;
    n.charged_to = reader;
  }

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
  std::vector<bool> closure_;
  std::set<std::size_t> reads_log_;
  Category category_ = Category::backbone_main;
  int layer_ = -1;
  bool grad_enabled_ = true;
};

namespace kernel {

/// C += op(A) * op(B) for one matrix. op(A) is p x q, op(B) is q x r.
/// A is stored p x q (or q x p when ta); B is stored q x r (or r x q when tb).
/// Every output element accumulates over k in ascending order in all four
/// variants, so results do not depend on the storage orientation.
template <typename T>
void gemm(std::size_t p, std::size_t q, std::size_t r, const T* A, bool ta, const T* B, bool tb, T* C) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < p; ++i) {
      T* c = C + i * r;
      for (std::size_t k = 0; k < q; ++k) {
        const T a = A[i * q + k];
        const T* b = B + k * r;
        for (std::size_t j = 0; j < r; ++j) c[j] += a * b[j];
      }
    }
  } else if (ta && !tb) {
    for (std::size_t k = 0; k < q; ++k) {
      const T* b = B + k * r;
      for (std::size_t i = 0; i < p; ++i) {
        const T a = A[k * p + i];
        T* c = C + i * r;
        for (std::size_t j = 0; j < r; ++j) c[j] += a * b[j];
      }
    }
  } else {
    // Transposed B: lay it out as q x r and accumulate each element from zero
    // in a scratch block, then add, exactly as a per-element dot product would.
    thread_local std::vector<T> bt, tmp;
    bt.resize(q * r);
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < q; ++k) bt[k * r + j] = B[j * q + k];
    tmp.assign(p * r, T{0});
    gemm(p, q, r, A, ta, bt.data(), false, tmp.data());
    for (std::size_t i = 0; i < p * r; ++i) C[i] += tmp[i];
  }
}

template <typename T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = static_cast<T>(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  constexpr T a = static_cast<T>(0.044715);
  const T t = std::tanh(c * (x + a * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * a * x * x);
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Op library. Matrices are the last two axes; an optional leading axis is the
// batch. Rank-2 operands of matmul broadcast over a rank-3 partner.
// ---------------------------------------------------------------------------

namespace detail {

inline void require_rank(const Shape& s, std::size_t lo, std::size_t hi, const char* op) {
  if (s.size() < lo || s.size() > hi) {
    throw DimensionError(std::string(op) + ": unsupported rank for shape " + to_string(s));
  }
}

inline Shape with_cols(Shape s, std::size_t c) {
  s.back() = c;
  return s;
}

inline Shape with_rows(Shape s, std::size_t r) {
  s[s.size() - 2] = r;
  return s;
}

}  // namespace detail

/// op(a) * b with op = transpose when `transpose_a`.
template <typename T>
Var matmul(Graph<T>& g, Var a, Var b, bool transpose_a = false) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  detail::require_rank(A.shape(), 2, 3, "matmul");
  detail::require_rank(B.shape(), 2, 3, "matmul");
  const std::size_t p = transpose_a ? A.cols() : A.rows();
  const std::size_t q = transpose_a ? A.rows() : A.cols();
  const std::size_t r = B.cols();
  if (B.rows() != q) {
    throw DimensionError("matmul inner extents differ: " + to_string(A.shape()) + (transpose_a ? "^T" : "") +
                         " x " + to_string(B.shape()));
  }
  const bool a3 = A.rank() == 3, b3 = B.rank() == 3;
  if (a3 && b3 && A.shape()[0] != B.shape()[0]) throw DimensionError("matmul batch extents differ");
  const std::size_t batch = a3 ? A.shape()[0] : (b3 ? B.shape()[0] : 1);
  Shape out_shape = (a3 || b3) ? Shape{batch, p, r} : Shape{p, r};
  Tensor<T> C(out_shape);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    kernel::gemm(p, q, r, A.data() + (a3 ? bi * p * q : 0), transpose_a, B.data() + (b3 ? bi * q * r : 0), false,
                 C.data() + bi * p * r);
  }
  return g.record(OpKind::matmul, {a, b}, std::move(C), {{1}, {0}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    if (gr.wants_grad(par[0])) {
                      const Tensor<T>& Bv = gr.saved(par[1]);
                      Tensor<T> dA(gr.node(par[0]).shape);
                      for (std::size_t bi = 0; bi < batch; ++bi) {
                        const T* Gb = G.data() + bi * p * r;
                        const T* Bb = Bv.data() + (b3 ? bi * q * r : 0);
                        T* dAb = dA.data() + (a3 ? bi * p * q : 0);
                        if (!transpose_a)
                          kernel::gemm(p, r, q, Gb, false, Bb, true, dAb);
                        else
                          kernel::gemm(q, r, p, Bb, false, Gb, true, dAb);
                      }
                      gr.accumulate(par[0], std::move(dA));
                    }
                    if (gr.wants_grad(par[1])) {
                      const Tensor<T>& Av = gr.saved(par[0]);
                      Tensor<T> dB(gr.node(par[1]).shape);
                      for (std::size_t bi = 0; bi < batch; ++bi) {
                        const T* Gb = G.data() + bi * p * r;
                        const T* Ab = Av.data() + (a3 ? bi * p * q : 0);
                        T* dBb = dB.data() + (b3 ? bi * q * r : 0);
                        kernel::gemm(q, p, r, Ab, !transpose_a, Gb, false, dBb);
                      }
                      gr.accumulate(par[1], std::move(dB));
                    }
                  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  A.require_same_shape(B, "add");
  Tensor<T> C = A;
  C += B;
  return g.record(OpKind::add, {a, b}, std::move(C), {{}, {}},
                  [](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    gr.accumulate(par[0], G);
                    gr.accumulate(par[1], G);
                  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  A.require_same_shape(B, "mul");
  Tensor<T> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  return g.record(OpKind::mul, {a, b}, std::move(C), {{1}, {0}},
                  [](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    for (int side = 0; side < 2; ++side) {
                      if (!gr.wants_grad(par[side])) continue;
                      const Tensor<T>& other = gr.saved(par[1 - side]);
                      Tensor<T> d(G.shape());
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] = G[i] * other[i];
                      gr.accumulate(par[side], std::move(d));
                    }
                  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T s) {
  Tensor<T> C = g.value(a);
  for (auto& v : C.values()) v *= s;
  return g.record(OpKind::scale, {a}, std::move(C), {{}}, [s](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
    Tensor<T> d = G;
    for (auto& v : d.values()) v *= s;
    gr.accumulate(gr.node(self).parents[0], std::move(d));
  });
}

/// y[.., i, j] = x[.., i, j] + b[i]
template <typename T>
Var add_row_bias(Graph<T>& g, Var x, Var b) {
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& Bv = g.value(b);
  detail::require_rank(X.shape(), 2, 3, "add_row_bias");
  const std::size_t p = X.rows(), q = X.cols(), batch = X.batch();
  if (Bv.rank() != 1 || Bv.size() != p) throw DimensionError("add_row_bias: bias length must equal row count");
  Tensor<T> Y = X;
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) Y[(bi * p + i) * q + j] += Bv[i];
  return g.record(OpKind::add_row_bias, {x, b}, std::move(Y), {{}, {}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    gr.accumulate(par[0], G);
                    if (gr.wants_grad(par[1])) {
                      Tensor<T> db({p});
                      for (std::size_t bi = 0; bi < batch; ++bi)
                        for (std::size_t i = 0; i < p; ++i)
                          for (std::size_t j = 0; j < q; ++j) db[i] += G[(bi * p + i) * q + j];
                      gr.accumulate(par[1], std::move(db));
                    }
                  });
}

/// y[.., i, j] = x[.., i, j] + b[j]
template <typename T>
Var add_col_bias(Graph<T>& g, Var x, Var b) {
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& Bv = g.value(b);
  detail::require_rank(X.shape(), 2, 3, "add_col_bias");
  const std::size_t q = X.cols(), outer = X.size() / q;
  if (Bv.rank() != 1 || Bv.size() != q) throw DimensionError("add_col_bias: bias length must equal column count");
  Tensor<T> Y = X;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < q; ++j) Y[o * q + j] += Bv[j];
  return g.record(OpKind::add_col_bias, {x, b}, std::move(Y), {{}, {}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    gr.accumulate(par[0], G);
                    if (gr.wants_grad(par[1])) {
                      Tensor<T> db({q});
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t j = 0; j < q; ++j) db[j] += G[o * q + j];
                      gr.accumulate(par[1], std::move(db));
                    }
                  });
}

/// Softmax over the entries of each column, stabilized by the column max.
template <typename T>
Var softmax_columns(Graph<T>& g, Var x) {
  const Tensor<T>& X = g.value(x);
  detail::require_rank(X.shape(), 2, 3, "softmax_columns");
  const std::size_t p = X.rows(), q = X.cols(), batch = X.batch();
  Tensor<T> Y(X.shape());
  std::vector<T> colmax(q), colsum(q);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* xb = X.data() + bi * p * q;
    T* yb = Y.data() + bi * p * q;
    for (std::size_t j = 0; j < q; ++j) colmax[j] = xb[j];
    for (std::size_t i = 1; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) colmax[j] = std::max(colmax[j], xb[i * q + j]);
    std::fill(colsum.begin(), colsum.end(), T{0});
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        const T e = std::exp(xb[i * q + j] - colmax[j]);
        yb[i * q + j] = e;
        colsum[j] += e;
      }
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) yb[i * q + j] /= colsum[j];
  }
  return g.record(OpKind::softmax_columns, {x}, std::move(Y), {{Graph<T>::kSelf}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const Tensor<T>& Yv = gr.saved(self);
                    Tensor<T> d(G.shape());
                    std::vector<T> dot(q);
                    for (std::size_t bi = 0; bi < batch; ++bi) {
                      const std::size_t off = bi * p * q;
                      std::fill(dot.begin(), dot.end(), T{0});
                      for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < q; ++j) dot[j] += G[off + i * q + j] * Yv[off + i * q + j];
                      for (std::size_t i = 0; i < p; ++i)
                        for (std::size_t j = 0; j < q; ++j)
                          d[off + i * q + j] = Yv[off + i * q + j] * (G[off + i * q + j] - dot[j]);
                    }
                    gr.accumulate(gr.node(self).parents[0], std::move(d));
                  });
}

/// Column-wise layer normalization with population variance.
template <typename T>
Var layernorm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-6)) {
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& Gm = g.value(gamma);
  const Tensor<T>& Bt = g.value(beta);
  detail::require_rank(X.shape(), 2, 3, "layernorm");
  const std::size_t D = X.rows(), n = X.cols(), batch = X.batch();
  if (D < 2) throw DimensionError("layernorm needs at least two features per column");
  if (Gm.size() != D || Bt.size() != D) throw DimensionError("layernorm affine parameters must have length D");
  Tensor<T> Y(X.shape());
  auto stats = [D, n, eps](const T* xb, std::size_t j, T& mean, T& inv) {
    T s = 0;
    for (std::size_t i = 0; i < D; ++i) s += xb[i * n + j];
    mean = s / static_cast<T>(D);
    T v = 0;
    for (std::size_t i = 0; i < D; ++i) {
      const T c = xb[i * n + j] - mean;
      v += c * c;
    }
    v /= static_cast<T>(D);
    inv = T(1) / std::sqrt(v + eps);
  };
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* xb = X.data() + bi * D * n;
    T* yb = Y.data() + bi * D * n;
    for (std::size_t j = 0; j < n; ++j) {
      T mean, inv;
      stats(xb, j, mean, inv);
      for (std::size_t i = 0; i < D; ++i) yb[i * n + j] = Gm[i] * ((xb[i * n + j] - mean) * inv) + Bt[i];
    }
  }
  return g.record(
      OpKind::layernorm, {x, gamma, beta}, std::move(Y), {{0, 1}, {0}, {}},
      [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
        const auto& par = gr.node(self).parents;
        const bool wx = gr.wants_grad(par[0]), wg = gr.wants_grad(par[1]), wb = gr.wants_grad(par[2]);
        Tensor<T> dx, dg, db;
        if (wx) dx = Tensor<T>(G.shape());
        if (wg) dg = Tensor<T>({D});
        if (wb) db = Tensor<T>({D});
        if (wb) {
          for (std::size_t bi = 0; bi < batch; ++bi)
            for (std::size_t i = 0; i < D; ++i)
              for (std::size_t j = 0; j < n; ++j) db[i] += G[(bi * D + i) * n + j];
        }
        if (wx || wg) {
          const Tensor<T>& Xv = gr.saved(par[0]);
          const Tensor<T>* Gv = wx ? &gr.saved(par[1]) : nullptr;
          std::vector<T> xhat(D), dxhat(D);
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const T* xb = Xv.data() + bi * D * n;
            const T* gb = G.data() + bi * D * n;
            for (std::size_t j = 0; j < n; ++j) {
              T mean, inv;
              stats(xb, j, mean, inv);
              for (std::size_t i = 0; i < D; ++i) xhat[i] = (xb[i * n + j] - mean) * inv;
              if (wg)
                for (std::size_t i = 0; i < D; ++i) dg[i] += gb[i * n + j] * xhat[i];
              if (wx) {
                T m1 = 0, m2 = 0;
                for (std::size_t i = 0; i < D; ++i) {
                  dxhat[i] = gb[i * n + j] * (*Gv)[i];
                  m1 += dxhat[i];
                  m2 += dxhat[i] * xhat[i];
                }
                m1 /= static_cast<T>(D);
                m2 /= static_cast<T>(D);
                for (std::size_t i = 0; i < D; ++i)
                  dx[(bi * D + i) * n + j] = inv * (dxhat[i] - m1 - xhat[i] * m2);
              }
            }
          }
        }
        if (wx) gr.accumulate(par[0], std::move(dx));
        if (wg) gr.accumulate(par[1], std::move(dg));
        if (wb) gr.accumulate(par[2], std::move(db));
      });
}

/// Elementwise GELU, tanh approximation.
template <typename T>
Var gelu(Graph<T>& g, Var x) {
  Tensor<T> Y = g.value(x);
  for (auto& v : Y.values()) v = kernel::gelu(v);
  return g.record(OpKind::gelu, {x}, std::move(Y), {{0}}, [](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
    const std::size_t p = gr.node(self).parents[0];
    const Tensor<T>& X = gr.saved(p);
    Tensor<T> d(G.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = G[i] * kernel::gelu_derivative(X[i]);
    gr.accumulate(p, std::move(d));
  });
}

/// Columns [begin, end) of every matrix.
template <typename T>
Var slice_cols(Graph<T>& g, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& X = g.value(x);
  detail::require_rank(X.shape(), 2, 3, "slice_cols");
  const std::size_t q = X.cols(), outer = X.size() / q;
  if (begin >= end || end > q) throw DimensionError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor<T> Y(detail::with_cols(X.shape(), w));
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(X.data() + o * q + begin, w, Y.data() + o * w);
  return g.record(OpKind::slice_cols, {x}, std::move(Y), {{}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const std::size_t p = gr.node(self).parents[0];
                    Tensor<T> d(gr.node(p).shape);
                    for (std::size_t o = 0; o < outer; ++o) std::copy_n(G.data() + o * w, w, d.data() + o * q + begin);
                    gr.accumulate(p, std::move(d));
                  });
}

template <typename T>
Var concat_cols(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of zero tensors");
  if (parts.size() == 1) return parts.front();
  const Shape& s0 = g.value(parts[0]).shape();
  detail::require_rank(s0, 2, 3, "concat_cols");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var v : parts) {
    const Shape& s = g.value(v).shape();
    if (s.size() != s0.size() || !std::equal(s.begin(), s.end() - 1, s0.begin())) {
      throw DimensionError("concat_cols: " + to_string(s) + " incompatible with " + to_string(s0));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t outer = numel(s0) / s0.back();
  Tensor<T> Y(detail::with_cols(s0, total));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& P = g.value(parts[k]);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(P.data() + o * widths[k], widths[k], Y.data() + o * total + off);
    off += widths[k];
  }
  return g.record(OpKind::concat_cols, parts, std::move(Y), typename Graph<T>::Reads(parts.size()),
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    std::size_t o2 = 0;
                    for (std::size_t k = 0; k < par.size(); ++k) {
                      if (gr.wants_grad(par[k])) {
                        Tensor<T> d(gr.node(par[k]).shape);
                        for (std::size_t o = 0; o < outer; ++o)
                          std::copy_n(G.data() + o * total + o2, widths[k], d.data() + o * widths[k]);
                        gr.accumulate(par[k], std::move(d));
                      }
                      o2 += widths[k];
                    }
                  });
}

/// Rows [begin, end) of every matrix.
template <typename T>
Var slice_rows(Graph<T>& g, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& X = g.value(x);
  detail::require_rank(X.shape(), 2, 3, "slice_rows");
  const std::size_t p = X.rows(), q = X.cols(), batch = X.batch();
  if (begin >= end || end > p) throw DimensionError("slice_rows: bad range");
  const std::size_t h = end - begin;
  Tensor<T> Y(detail::with_rows(X.shape(), h));
  for (std::size_t bi = 0; bi < batch; ++bi)
    std::copy_n(X.data() + (bi * p + begin) * q, h * q, Y.data() + bi * h * q);
  return g.record(OpKind::slice_rows, {x}, std::move(Y), {{}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const std::size_t par = gr.node(self).parents[0];
                    Tensor<T> d(gr.node(par).shape);
                    for (std::size_t bi = 0; bi < batch; ++bi)
                      std::copy_n(G.data() + bi * h * q, h * q, d.data() + (bi * p + begin) * q);
                    gr.accumulate(par, std::move(d));
                  });
}

template <typename T>
Var concat_rows(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of zero tensors");
  if (parts.size() == 1) return parts.front();
  const Shape& s0 = g.value(parts[0]).shape();
  detail::require_rank(s0, 2, 3, "concat_rows");
  const std::size_t q = s0.back();
  const std::size_t batch = s0.size() == 3 ? s0[0] : 1;
  std::vector<std::size_t> heights;
  std::size_t total = 0;
  for (Var v : parts) {
    const Shape& s = g.value(v).shape();
    if (s.size() != s0.size() || s.back() != q || (s.size() == 3 && s[0] != batch)) {
      throw DimensionError("concat_rows: " + to_string(s) + " incompatible with " + to_string(s0));
    }
    heights.push_back(s[s.size() - 2]);
    total += heights.back();
  }
  Tensor<T> Y(detail::with_rows(s0, total));
  for (std::size_t bi = 0; bi < batch; ++bi) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor<T>& P = g.value(parts[k]);
      std::copy_n(P.data() + bi * heights[k] * q, heights[k] * q, Y.data() + (bi * total + off) * q);
      off += heights[k];
    }
  }
  return g.record(OpKind::concat_rows, parts, std::move(Y), typename Graph<T>::Reads(parts.size()),
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < par.size(); ++k) {
                      if (gr.wants_grad(par[k])) {
                        Tensor<T> d(gr.node(par[k]).shape);
                        for (std::size_t bi = 0; bi < batch; ++bi)
                          std::copy_n(G.data() + (bi * total + off) * q, heights[k] * q,
                                      d.data() + bi * heights[k] * q);
                        gr.accumulate(par[k], std::move(d));
                      }
                      off += heights[k];
                    }
                  });
}

/// Mean over the columns of every matrix: [.., p, q] -> [.., p, 1].
template <typename T>
Var mean_cols(Graph<T>& g, Var x) {
  const Tensor<T>& X = g.value(x);
  detail::require_rank(X.shape(), 2, 3, "mean_cols");
  const std::size_t q = X.cols(), outer = X.size() / q;
  Tensor<T> Y(detail::with_cols(X.shape(), 1));
  for (std::size_t o = 0; o < outer; ++o) {
    T s = 0;
    for (std::size_t j = 0; j < q; ++j) s += X[o * q + j];
    Y[o] = s / static_cast<T>(q);
  }
  return g.record(OpKind::mean_cols, {x}, std::move(Y), {{}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const std::size_t p = gr.node(self).parents[0];
                    Tensor<T> d(gr.node(p).shape);
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t j = 0; j < q; ++j) d[o * q + j] = G[o] / static_cast<T>(q);
                    gr.accumulate(p, std::move(d));
                  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  Tensor<T> Y = g.value(x).reshaped(std::move(shape));
  return g.record(OpKind::reshape, {x}, std::move(Y), {{}}, [](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
    const std::size_t p = gr.node(self).parents[0];
    gr.accumulate(p, G.reshaped(gr.node(p).shape));
  });
}

/// Repeat a matrix along a new leading batch axis.
template <typename T>
Var broadcast_batch(Graph<T>& g, Var x, std::size_t batch) {
  const Tensor<T>& X = g.value(x);
  if (X.rank() != 2) throw DimensionError("broadcast_batch expects a matrix");
  Shape s{batch, X.rows(), X.cols()};
  Tensor<T> Y(s);
  for (std::size_t bi = 0; bi < batch; ++bi) std::copy_n(X.data(), X.size(), Y.data() + bi * X.size());
  return g.record(OpKind::broadcast_batch, {x}, std::move(Y), {{}},
                  [=](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const std::size_t p = gr.node(self).parents[0];
                    Tensor<T> d(gr.node(p).shape);
                    const std::size_t m = d.size();
                    for (std::size_t bi = 0; bi < batch; ++bi)
                      for (std::size_t i = 0; i < m; ++i) d[i] += G[bi * m + i];
                    gr.accumulate(p, std::move(d));
                  });
}

/// sum_k w[k] * xs[k] for equally shaped xs and a weight vector w.
template <typename T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& xs, Var w) {
  const Tensor<T>& W = g.value(w);
  if (xs.empty()) throw ContractError("weighted_sum of zero tensors");
  if (W.rank() != 1 || W.size() != xs.size()) throw ContractError("weighted_sum: weight length must equal input count");
  Tensor<T> Y(g.value(xs[0]).shape());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor<T>& X = g.value(xs[k]);
    X.require_same_shape(Y, "weighted_sum");
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] += W[k] * X[i];
  }
  std::vector<Var> parents = xs;
  parents.push_back(w);
  const int wslot = static_cast<int>(xs.size());
  typename Graph<T>::Reads reads(parents.size());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    reads[k] = {wslot};
    reads[xs.size()].push_back(static_cast<int>(k));
  }
  const std::size_t count = xs.size();
  return g.record(OpKind::weighted_sum, parents, std::move(Y), reads,
                  [count](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const auto& par = gr.node(self).parents;
                    const std::size_t wid = par[count];
                    if (gr.wants_grad(wid)) {
                      Tensor<T> dw({count});
                      for (std::size_t k = 0; k < count; ++k) {
                        const Tensor<T>& X = gr.saved(par[k]);
                        T s = 0;
                        for (std::size_t i = 0; i < X.size(); ++i) s += G[i] * X[i];
                        dw[k] = s;
                      }
                      gr.accumulate(wid, std::move(dw));
                    }
                    bool any = false;
                    for (std::size_t k = 0; k < count; ++k) any = any || gr.wants_grad(par[k]);
                    if (!any) return;
                    const Tensor<T>& W = gr.saved(wid);
                    for (std::size_t k = 0; k < count; ++k) {
                      if (!gr.wants_grad(par[k])) continue;
                      Tensor<T> d = G;
                      for (auto& v : d.values()) v *= W[k];
                      gr.accumulate(par[k], std::move(d));
                    }
                  });
}

/// Mean softmax cross-entropy of logits [B, C] against integer labels.
template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, std::vector<std::size_t> labels) {
  const Tensor<T>& Z = g.value(logits);
  if (Z.rank() != 2) throw DimensionError("cross_entropy expects logits [batch, classes]");
  const std::size_t B = Z.rows(), C = Z.cols();
  if (labels.size() != B) throw DimensionError("cross_entropy: label count differs from batch");
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= C) throw ContractError("label out of range");
    const T* z = Z.data() + b * C;
    const T m = *std::max_element(z, z + C);
    T s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - m);
    loss += m + std::log(s) - z[labels[b]];
  }
  Tensor<T> L({1}, std::vector<T>{loss / static_cast<T>(B)});
  return g.record(OpKind::cross_entropy, {logits}, std::move(L), {{0}},
                  [B, C, labels = std::move(labels)](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const std::size_t p = gr.node(self).parents[0];
                    const Tensor<T>& Zv = gr.saved(p);
                    Tensor<T> d({B, C});
                    const T scale_ = G[0] / static_cast<T>(B);
                    for (std::size_t b = 0; b < B; ++b) {
                      const T* z = Zv.data() + b * C;
                      const T m = *std::max_element(z, z + C);
                      T s = 0;
                      for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - m);
                      for (std::size_t c = 0; c < C; ++c) {
                        const T prob = std::exp(z[c] - m) / s;
                        d[b * C + c] = scale_ * (prob - (c == labels[b] ? T(1) : T(0)));
                      }
                    }
                    gr.accumulate(p, std::move(d));
                  });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  const Tensor<T>& X = g.value(x);
  T s = 0;
  for (auto v : X.values()) s += v;
  return g.record(OpKind::sum, {x}, Tensor<T>({1}, std::vector<T>{s}), {{}},
                  [](Graph<T>& gr, std::size_t self, const Tensor<T>& G) {
                    const std::size_t p = gr.node(self).parents[0];
                    gr.accumulate(p, Tensor<T>(gr.node(p).shape, G[0]));
                  });
}

}  // namespace vqt
