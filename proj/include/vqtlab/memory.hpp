// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>

#include "vqtlab/harness.hpp"

namespace vqt {

/// Bytes the tape holds for backward: retained activations plus gradient
/// buffers, excluding weights and input data.
struct MemoryReport {
  std::array<std::size_t, kCategoryCount> by_category{};
  std::size_t activation_bytes = 0;
  std::size_t grad_buffer_bytes = 0;
  std::size_t peak_total = 0;
  std::size_t tunable_param_bytes = 0;
  std::vector<std::size_t> by_layer;  // retained activation bytes of nodes recorded inside layer m

  std::size_t category(Category c) const { return by_category[static_cast<std::size_t>(c)]; }
};

/// One forward and backward of `m` on batch `b`; accounting is read before
/// backward, when every retained value is still alive.
template <typename T>
MemoryReport profile_step(ProbeModel<T>& m, const Batch<T>& b, const std::vector<std::size_t>& labels) {
  Graph<T> g;
  Binder<T> bind;
  Var loss = m.loss(g, bind, b, labels);
  MemoryReport r;
  r.by_category = g.retained_by_category();
  r.activation_bytes = g.total_activation_bytes();
  r.peak_total = g.total_retained();
  r.grad_buffer_bytes = r.peak_total - r.activation_bytes;
  std::size_t sum = 0;
  for (auto v : r.by_category) sum += v;
  if (sum != r.peak_total) throw ContractError("category totals disagree with the tape total");
  r.tunable_param_bytes = m.trainable_scalars() * sizeof(T);
  r.by_layer.assign(m.config().layers, 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const int layer = g.node(i).layer;
    if (layer >= 0 && static_cast<std::size_t>(layer) < r.by_layer.size()) r.by_layer[layer] += g.activation_bytes(i);
  }
  g.backward(loss);
  return r;
}

struct TradeoffPoint {
  Strategy strategy = Strategy::vqt;
  std::size_t layers = 0;  // active layers, counted from the top
  std::size_t bytes = 0;
  double accuracy = 0;
};

struct TradeoffRow {
  double budget = 0;  // bytes; infinity for no limit
  Strategy strategy = Strategy::vqt;
  bool feasible = false;
  std::size_t layers = 0;  // largest insertion depth that fits
  std::size_t bytes = 0;
  double accuracy = 0;       // at that depth
  double best_accuracy = 0;  // over every configuration that fits
};

/// For every budget and strategy: the deepest insertion whose footprint fits
/// and the best accuracy among all that fit, or an infeasible row.
inline std::vector<TradeoffRow> tradeoff_table(const std::vector<TradeoffPoint>& points,
                                               const std::vector<double>& budgets) {
  std::vector<Strategy> order;
  for (const auto& p : points)
    if (std::find(order.begin(), order.end(), p.strategy) == order.end()) order.push_back(p.strategy);
  std::vector<TradeoffRow> rows;
  for (double budget : budgets)
    for (Strategy s : order) {
      TradeoffRow row{budget, s};
      for (const auto& p : points) {
        if (p.strategy != s || static_cast<double>(p.bytes) > budget) continue;
        row.best_accuracy = row.feasible ? std::max(row.best_accuracy, p.accuracy) : p.accuracy;
        if (!row.feasible || p.layers > row.layers) {
          row.layers = p.layers;
          row.bytes = p.bytes;
          row.accuracy = p.accuracy;
        }
        row.feasible = true;
      }
      rows.push_back(row);
    }
  return rows;
}

/// Measures footprint and accuracy for each strategy inserted into the last
/// k layers, k = 1..M.
template <typename T>
std::vector<TradeoffPoint> measure_tradeoff(const ViTWeights<T>& backbone, const Dataset<T>& train,
                                            const Dataset<T>& test, const ExperimentConfig& base,
                                            const std::vector<Strategy>& strategies) {
  std::vector<TradeoffPoint> out;
  const std::size_t B = std::min(base.batch, train.size());
  std::vector<std::size_t> idx(B);
  std::iota(idx.begin(), idx.end(), 0);
  for (Strategy s : strategies)
    for (std::size_t k = 1; k <= backbone.config.layers; ++k) {
      ExperimentConfig cfg = base;
      cfg.strategy.strategy = s;
      cfg.strategy.layers = "last:" + std::to_string(k);
      ProbeModel<T> m(backbone, cfg.strategy, train.classes, cfg.seed);
      auto rep = profile_step(m, make_batch(train, idx, backbone.config.patch_size), train.labels_at(idx));
      auto run = run_experiment(backbone, train, test, cfg);
      out.push_back({s, k, rep.peak_total, run.test_acc});
    }
  return out;
}

inline void write_tradeoff_csv(std::ostream& os, const std::vector<TradeoffRow>& rows) {
  os << "budget_bytes,strategy,feasible,layers,retained_bytes,test_acc,best_test_acc\n";
  for (const auto& r : rows) {
    os << (std::isinf(r.budget) ? std::string("inf") : std::to_string(static_cast<std::size_t>(r.budget))) << ','
       << strategy_name(r.strategy) << ',' << (r.feasible ? 1 : 0) << ',' << r.layers << ',' << r.bytes << ','
       << std::fixed << std::setprecision(6) << r.accuracy << ',' << r.best_accuracy << '\n';
  }
}

}  // namespace vqt
