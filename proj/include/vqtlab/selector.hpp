// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "vqtlab/autodiff.hpp"
#include "vqtlab/optim.hpp"
#include "vqtlab/random.hpp"

namespace vqt {

/// Linear classifier over feature rows: logits = X W + b, W [dim, C].
template <typename T>
struct LinearHead {
  Tensor<T> w;
  Tensor<T> b;

  std::vector<std::size_t> predict(const Tensor<T>& x) const {
    const std::size_t n = x.shape()[0], dim = x.shape()[1], C = b.size();
    std::vector<std::size_t> out(n);
    std::vector<T> z(C);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        T s = b[c];
        for (std::size_t k = 0; k < dim; ++k) s += x[i * dim + k] * w[k * C + c];
        z[c] = s;
      }
      out[i] = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    }
    return out;
  }
};

inline double accuracy(const std::vector<std::size_t>& pred, std::span<const std::size_t> labels) {
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline std::size_t class_count(std::span<const std::size_t> labels) {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

struct HeadTrainConfig {
  double lr = 0.1;
  double weight_decay = 0.0;
  std::size_t epochs = 100;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
};

/// Mean softmax cross-entropy of a head on feature rows.
template <typename T>
double head_loss(const LinearHead<T>& h, const Tensor<T>& x, std::span<const std::size_t> y) {
  Graph<T> g;
  typename Graph<T>::NoGrad off(g);
  Var logits = add_col_bias(g, matmul(g, g.constant(x), g.constant(h.w)), g.constant(h.b));
  return static_cast<double>(g.value(cross_entropy(g, logits, std::vector<std::size_t>(y.begin(), y.end())))[0]);
}

/// Minibatch Adam with cosine decay over epochs * batches steps; zero init.
template <typename T>
LinearHead<T> train_linear_head(const Tensor<T>& x, std::span<const std::size_t> y, std::size_t classes,
                                const HeadTrainConfig& cfg) {
  if (x.rank() != 2) throw DimensionError("feature matrix must be [n, dim]");
  const std::size_t n = x.shape()[0], dim = x.shape()[1];
  if (y.size() != n) throw DimensionError("label count does not match feature rows");
  LinearHead<T> h{Tensor<T>({dim, classes}), Tensor<T>({classes})};
  const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
  Adam<T> opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay, .horizon = cfg.epochs * per_epoch});
  Rng rng(cfg.seed);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    auto order = rng.permutation(n);
    for (std::size_t s = 0; s < n; s += cfg.batch) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch, n - s));
      std::vector<std::size_t> yb;
      for (auto i : idx) yb.push_back(y[i]);
      Graph<T> g;
      Var w = g.leaf(h.w, true), b = g.leaf(h.b, true);
      Var logits = add_col_bias(g, matmul(g, g.constant(gather_leading(x, idx)), w), b);
      g.backward(cross_entropy(g, logits, std::move(yb)));
      opt.step({&h.w, &h.b}, {g.grad(w), g.grad(b)});
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Group lasso
// ---------------------------------------------------------------------------

/// Row-wise group soft threshold: row *= max(0, 1 - thr / ||row||).
template <typename T>
void group_soft_threshold(Tensor<T>& w, double thr) {
  const std::size_t rows = w.shape()[0], cols = w.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = w.data() + r * cols;
    double norm = 0;
    for (std::size_t c = 0; c < cols; ++c) norm += double(row[c]) * row[c];
    norm = std::sqrt(norm);
    const double keep = norm > thr ? 1.0 - thr / norm : 0.0;
    for (std::size_t c = 0; c < cols; ++c) row[c] = keep == 0.0 ? T(0) : static_cast<T>(row[c] * keep);
  }
}

struct GroupLassoConfig {
  double lambda = 1e-3;
  std::size_t steps = 500;
  double step_size = 0.0;  // 0: 1/L from a power-iteration Lipschitz bound
};

/// Lipschitz bound of the mean softmax cross-entropy gradient over [X 1]:
/// 0.5 * lambda_max([X 1]^T [X 1] / n).
template <typename T>
double lipschitz_bound(const Tensor<T>& x) {
  const std::size_t n = x.shape()[0], dim = x.shape()[1];
  std::vector<double> v(dim + 1, 1.0), u(n);
  double lam = 0;
  for (int it = 0; it < 100; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = v[dim];
      for (std::size_t k = 0; k < dim; ++k) s += x[i * dim + k] * v[k];
      u[i] = s;
    }
    std::vector<double> next(dim + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < dim; ++k) next[k] += x[i * dim + k] * u[i];
      next[dim] += u[i];
    }
    double norm = 0;
    for (double a : next) norm += a * a;
    norm = std::sqrt(norm);
    if (norm == 0) return 1.0;
    lam = norm / static_cast<double>(n);
    for (std::size_t k = 0; k <= dim; ++k) v[k] = next[k] / norm;
  }
  return 0.5 * lam * 1.05;
}

/// Proximal gradient on mean cross-entropy + lambda * sum_i ||W_i||_2 with an
/// unpenalized bias. Full batch, deterministic.
template <typename T>
LinearHead<T> train_head_group_lasso(const Tensor<T>& x, std::span<const std::size_t> y, std::size_t classes,
                                     const GroupLassoConfig& cfg) {
  if (x.rank() != 2) throw DimensionError("feature matrix must be [n, dim]");
  if (!x.all_finite()) throw NumericalError("non-finite feature passed to group lasso");
  if (cfg.lambda < 0) throw ContractError("lambda must be nonnegative");
  const std::size_t n = x.shape()[0], dim = x.shape()[1], C = classes;
  if (n == 0 || y.size() != n) throw DimensionError("label count does not match feature rows");
  const double eta = cfg.step_size > 0 ? cfg.step_size : 1.0 / lipschitz_bound(x);
  LinearHead<T> h{Tensor<T>({dim, C}), Tensor<T>({C})};
  std::vector<double> gz(n * C), gw(dim * C);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::vector<double> gb(C, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double* z = gz.data() + i * C;
      for (std::size_t c = 0; c < C; ++c) {
        double s = h.b[c];
        for (std::size_t k = 0; k < dim; ++k) s += double(x[i * dim + k]) * h.w[k * C + c];
        z[c] = s;
      }
      const double mx = *std::max_element(z, z + C);
      double tot = 0;
      for (std::size_t c = 0; c < C; ++c) tot += (z[c] = std::exp(z[c] - mx));
      for (std::size_t c = 0; c < C; ++c) {
        z[c] = (z[c] / tot - (y[i] == c ? 1.0 : 0.0)) / static_cast<double>(n);
        gb[c] += z[c];
      }
      for (std::size_t k = 0; k < dim; ++k) {
        const double xv = x[i * dim + k];
        if (xv == 0) continue;
        for (std::size_t c = 0; c < C; ++c) gw[k * C + c] += xv * z[c];
      }
    }
    for (std::size_t k = 0; k < dim * C; ++k) h.w[k] = static_cast<T>(h.w[k] - eta * gw[k]);
    for (std::size_t c = 0; c < C; ++c) h.b[c] = static_cast<T>(h.b[c] - eta * gb[c]);
    if (cfg.lambda > 0) group_soft_threshold(h.w, eta * cfg.lambda);
  }
  if (!h.w.all_finite()) throw NumericalError("group lasso diverged");
  return h;
}

/// Feature importance: l2 norm of each classifier row.
template <typename T>
std::vector<double> row_norms(const Tensor<T>& w) {
  const std::size_t rows = w.shape()[0], cols = w.size() / rows;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += double(w[r * cols + c]) * w[r * cols + c];
    out[r] = std::sqrt(s);
  }
  return out;
}

/// Top round(F * |scores|) indices by score, ties by ascending index; the
/// result is in rank order.
inline std::vector<std::size_t> select_fraction(std::span<const double> scores, double f) {
  if (!(f > 0.0 && f <= 1.0)) throw ContractError("selection fraction must lie in (0, 1]");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto keep = static_cast<std::size_t>(std::llround(f * static_cast<double>(scores.size())));
  idx.resize(keep);
  return idx;
}

/// Feature positions of H_all: |active| blocks of D*T, then a CLS block of D.
struct FeatureLayout {
  std::size_t layers = 0;  // active layers contributing blocks
  std::size_t block = 0;   // D*T (or D*k after aggregation)
  std::size_t cls = 0;     // D; 0 when the vector has no CLS block

  std::size_t size() const { return layers * block + cls; }
};

struct LayerImportance {
  std::vector<double> per_layer;
  double cls = 0.0;
};

inline LayerImportance layer_importance(std::span<const double> scores, const FeatureLayout& layout) {
  if (scores.size() != layout.size()) throw DimensionError("scores do not match the feature layout");
  LayerImportance out;
  for (std::size_t m = 0; m < layout.layers; ++m) {
    double s = 0;
    for (std::size_t i = 0; i < layout.block; ++i) s += scores[m * layout.block + i];
    out.per_layer.push_back(layout.block ? s / static_cast<double>(layout.block) : 0.0);
  }
  if (layout.cls) {
    double s = 0;
    for (std::size_t i = 0; i < layout.cls; ++i) s += scores[layout.layers * layout.block + i];
    out.cls = s / static_cast<double>(layout.cls);
  }
  return out;
}

/// Columns `kept` of a feature matrix.
template <typename T>
Tensor<T> select_columns(const Tensor<T>& x, std::span<const std::size_t> kept) {
  if (kept.empty()) throw ContractError("empty feature selection");
  const std::size_t n = x.shape()[0], dim = x.shape()[1];
  Tensor<T> out({n, kept.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < kept.size(); ++j) {
      if (kept[j] >= dim) throw DimensionError("selected feature index out of range");
      out[i * kept.size() + j] = x[i * dim + kept[j]];
    }
  return out;
}

/// Fresh unregularized head on the kept columns.
template <typename T>
LinearHead<T> retrain_selected(const Tensor<T>& x, std::span<const std::size_t> y, std::size_t classes,
                               std::span<const std::size_t> kept, const HeadTrainConfig& cfg) {
  return train_linear_head(select_columns(x, kept), y, classes, cfg);
}

/// Column z-scoring fitted on one matrix and applied to others.
template <typename T>
struct Standardizer {
  std::vector<double> mean, inv_std;

  static Standardizer fit(const Tensor<T>& x) {
    const std::size_t n = x.shape()[0], dim = x.shape()[1];
    Standardizer s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dim; ++k) s.mean[k] += x[i * dim + k];
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = x[i * dim + k] - s.mean[k];
        s.inv_std[k] += d * d;
      }
    for (auto& v : s.inv_std) {
      const double sd = std::sqrt(v / static_cast<double>(n));
      v = sd > 1e-12 ? 1.0 / sd : 0.0;
    }
    return s;
  }

  Tensor<T> apply(const Tensor<T>& x) const {
    Tensor<T> out = x;
    const std::size_t dim = mean.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::size_t k = i % dim;
      out[i] = static_cast<T>((x[i] - mean[k]) * inv_std[k]);
    }
    return out;
  }
};

struct SelectionReport {
  std::vector<double> scores;
  std::vector<std::size_t> kept;  // ascending
  LayerImportance importance;
  double fraction = 1.0;
  double lambda = 0.0;
  bool cls_always_kept = true;
};

/// CLS block always kept; F applies to the remaining features.
inline std::vector<std::size_t> select_with_cls(std::span<const double> scores, double f, const FeatureLayout& layout) {
  const std::size_t body = layout.layers * layout.block;
  std::vector<std::size_t> kept;
  if (body > 0) kept = select_fraction(scores.subspan(0, body), f);
  for (std::size_t i = 0; i < layout.cls; ++i) kept.push_back(body + i);
  std::sort(kept.begin(), kept.end());
  return kept;
}

struct SelectionConfig {
  double fraction = 1.0;
  std::vector<double> lambdas{1e-4, 1e-3, 1e-2};
  std::size_t lasso_steps = 500;
  HeadTrainConfig retrain;
  std::uint64_t seed = 0;
};

/// Two-phase selection on frozen features: lambda chosen on an 80/20 split
/// (train lasso, select, retrain, score on the 20), then lasso on all rows
/// with the chosen lambda. Scores are only comparable across features of
/// similar scale, so callers normally pass standardized columns.
template <typename T>
SelectionReport select_features(const Tensor<T>& x, std::span<const std::size_t> y, std::size_t classes,
                                const FeatureLayout& layout, const SelectionConfig& cfg) {
  if (cfg.lambdas.empty()) throw ConfigError("lambda grid is empty");
  if (x.shape()[1] != layout.size()) throw DimensionError("feature matrix does not match layout");
  const std::size_t n = x.shape()[0];
  Rng rng(cfg.seed);
  auto perm = rng.permutation(n);
  const std::size_t n_train = std::max<std::size_t>(1, n * 8 / 10);
  std::vector<std::size_t> tr(perm.begin(), perm.begin() + n_train), va(perm.begin() + n_train, perm.end());
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  auto rows = [&](const std::vector<std::size_t>& idx, Tensor<T>& xs, std::vector<std::size_t>& ys) {
    xs = gather_leading(x, idx);
    ys.clear();
    for (auto i : idx) ys.push_back(y[i]);
  };
  double best_lambda = cfg.lambdas.front(), best_acc = -1;
  if (!va.empty() && cfg.lambdas.size() > 1) {
    Tensor<T> xt, xv;
    std::vector<std::size_t> yt, yv;
    rows(tr, xt, yt);
    rows(va, xv, yv);
    auto grid = cfg.lambdas;
    std::sort(grid.begin(), grid.end());
    for (double lam : grid) {
      auto h = train_head_group_lasso(xt, yt, classes, {.lambda = lam, .steps = cfg.lasso_steps});
      auto kept = select_with_cls(row_norms(h.w), cfg.fraction, layout);
      auto head = retrain_selected(xt, yt, classes, kept, cfg.retrain);
      const double acc = accuracy(head.predict(select_columns(xv, kept)), yv);
      if (acc > best_acc) best_acc = acc, best_lambda = lam;
    }
  }
  SelectionReport rep;
  rep.lambda = best_lambda;
  rep.fraction = cfg.fraction;
  auto h = train_head_group_lasso(x, y, classes, {.lambda = best_lambda, .steps = cfg.lasso_steps});
  rep.scores = row_norms(h.w);
  rep.kept = select_with_cls(rep.scores, cfg.fraction, layout);
  rep.importance = layer_importance(rep.scores, layout);
  return rep;
}

}  // namespace vqt
