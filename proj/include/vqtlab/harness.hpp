// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "vqtlab/probe.hpp"

namespace vqt {

/// Worker count for grid cells: VQTLAB_THREADS if set, else the hardware.
inline std::size_t thread_budget() {
  if (const char* env = std::getenv("VQTLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each task's
/// exception is rethrown on the caller after all tasks finish.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < n;) run(i);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct TrainOptions {
  double lr = 0.1;
  double weight_decay = 0.0;
  std::size_t epochs = 100;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
};

struct TrainStats {
  std::size_t steps = 0;
  std::size_t peak_retained = 0;  // activation + grad-buffer bytes of the largest step
  double last_loss = 0;
};

/// Trains `m` from a fresh reset on the rows `idx` of `data`.
template <typename T>
TrainStats train_probe(ProbeModel<T>& m, const Dataset<T>& data, std::span<const std::size_t> idx,
                       const TrainOptions& opt, const FeatureCache<T>* cache = nullptr) {
  if (idx.empty()) throw ContractError("training set is empty");
  m.reset(opt.seed);
  const bool frozen = m.strategy().strategy != Strategy::finetune;
  const auto backbone = m.backbone_tensors();
  const std::size_t per_epoch = (idx.size() + opt.batch - 1) / opt.batch;
  Adam<T> adam({.lr = opt.lr, .weight_decay = opt.weight_decay, .horizon = opt.epochs * per_epoch});
  Rng rng(opt.seed ^ 0x5eedULL);
  TrainStats stats;
  std::vector<std::size_t> rows(idx.size());
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    auto order = rng.permutation(idx.size());
    for (std::size_t i = 0; i < order.size(); ++i) rows[i] = idx[order[i]];
    for (std::size_t s = 0; s < rows.size(); s += opt.batch) {
      std::span<const std::size_t> b(rows.data() + s, std::min(opt.batch, rows.size() - s));
      Graph<T> g;
      Binder<T> bind;
      Var loss = m.loss(g, bind, make_batch(data, b, m.config().patch_size, cache), data.labels_at(b));
      stats.peak_retained = std::max(stats.peak_retained, g.total_retained());
      g.backward(loss);
      stats.last_loss = static_cast<double>(g.value(loss)[0]);
      if (!std::isfinite(stats.last_loss)) throw NumericalError("loss became non-finite");
      std::vector<Tensor<T>*> params;
      std::vector<const Tensor<T>*> grads;
      for (const auto& entry : bind.entries()) {
        if (frozen && backbone.count(entry.tensor)) throw ContractError("frozen strategy produced a backbone gradient");
        params.push_back(entry.tensor);
        grads.push_back(g.grad(entry.var));
      }
      adam.step(params, grads);
      ++stats.steps;
    }
  }
  return stats;
}

/// No-grad features [n, feature_dim] of rows `idx`.
template <typename T>
Tensor<T> extract_features(ProbeModel<T>& m, const Dataset<T>& data, std::span<const std::size_t> idx,
                           const FeatureCache<T>* cache = nullptr, std::size_t batch = 128) {
  Tensor<T> out({idx.size(), m.feature_dim()});
  for (std::size_t s = 0; s < idx.size(); s += batch) {
    std::span<const std::size_t> b = idx.subspan(s, std::min(batch, idx.size() - s));
    Graph<T> g;
    typename Graph<T>::NoGrad off(g);
    Binder<T> bind;
    const Tensor<T>& f = g.value(m.features(g, bind, make_batch(data, b, m.config().patch_size, cache)));
    std::copy(f.values().begin(), f.values().end(), out.data() + s * m.feature_dim());
  }
  return out;
}

template <typename T>
double evaluate(ProbeModel<T>& m, const Dataset<T>& data, std::span<const std::size_t> idx,
                const FeatureCache<T>* cache = nullptr) {
  if (idx.empty()) return 0.0;
  LinearHead<T> head{m.head_w(), m.head_b()};
  return accuracy(head.predict(extract_features(m, data, idx, cache)), data.labels_at(idx));
}

struct ExperimentConfig {
  StrategyConfig strategy;
  std::vector<double> lrs{1.0, 0.5, 0.25, 0.1, 0.05};
  std::vector<double> wds{0.01, 0.001, 0.0001, 0.0};
  std::size_t epochs = 100;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
  double data_fraction = 1.0;
  bool cache = true;
  std::vector<double> lambdas{1e-4, 1e-3, 1e-2};
  std::size_t lasso_steps = 500;
  std::size_t threads = 0;  // 0: thread_budget()

  void validate() const {
    if (lrs.empty() || wds.empty()) throw ConfigError("lr and wd grids must be nonempty");
    if (lambdas.empty()) throw ConfigError("lambda grid must be nonempty");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (!(data_fraction > 0 && data_fraction <= 1)) throw ConfigError("data_fraction must lie in (0, 1]");
    if (!(strategy.fraction > 0 && strategy.fraction <= 1)) throw ConfigError("F must lie in (0, 1]");
  }
};

/// Seeded 80/20 split of `idx`; both halves keep ascending order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_80_20(std::span<const std::size_t> idx,
                                                                                 std::uint64_t seed) {
  Rng rng(seed);
  auto perm = rng.permutation(idx.size());
  const std::size_t n_train = std::max<std::size_t>(1, idx.size() * 8 / 10);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < perm.size(); ++i) (i < n_train ? a : b).push_back(idx[perm[i]]);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {a, b};
}

/// First round(f * n) rows of a seeded permutation (all rows, in order, at f = 1).
inline std::vector<std::size_t> data_subset(std::size_t n, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (fraction >= 1.0) return all;
  Rng rng(seed);
  auto perm = rng.permutation(n);
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * n)));
  std::vector<std::size_t> out(perm.begin(), perm.begin() + k);
  std::sort(out.begin(), out.end());
  return out;
}

struct GridCell {
  double lr = 0, wd = 0;
  double val_acc = 0;
  bool failed = false;
};

/// Index of the winning cell: best validation accuracy, then lower lr, then
/// lower wd. Returns cells.size() when every cell failed.
inline std::size_t pick_cell(const std::vector<GridCell>& cells) {
  std::size_t best = cells.size();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].failed) continue;
    if (best == cells.size()) {
      best = i;
      continue;
    }
    const auto& a = cells[i];
    const auto& b = cells[best];
    if (a.val_acc > b.val_acc || (a.val_acc == b.val_acc && (a.lr < b.lr || (a.lr == b.lr && a.wd < b.wd))))
      best = i;
  }
  return best;
}

struct RunResult {
  std::string strategy;
  std::uint64_t seed = 0;
  std::string axis = "none";
  std::string axis_value;
  double lr = 0, wd = 0;
  std::optional<double> lambda;
  double train_acc = 0, val_acc = 0, test_acc = 0;
  std::size_t tunable_params = 0;
  std::size_t retained_bytes = 0;
  double wall_ms = 0;
  std::vector<GridCell> cells;
  std::optional<SelectionReport> selection;

  std::string hyperparams() const {
    std::ostringstream os;
    os << "lr=" << lr << ";wd=" << wd;
    if (lambda) os << ";lambda=" << *lambda;
    return os.str();
  }
};

namespace detail {

template <typename T>
struct HeadFit {
  LinearHead<T> head;
  GridCell cell;
  std::vector<GridCell> cells;
};

// Grid search for a linear head on fixed features.
template <typename T>
HeadFit<T> fit_head(const Tensor<T>& x, std::span<const std::size_t> y, std::size_t classes,
                    const ExperimentConfig& cfg) {
  std::vector<std::size_t> all(y.size());
  std::iota(all.begin(), all.end(), 0);
  auto [tr, va] = split_80_20(all, cfg.seed);
  Tensor<T> xt = gather_leading(x, tr), xv = gather_leading(x, va);
  std::vector<std::size_t> yt, yv;
  for (auto i : tr) yt.push_back(y[i]);
  for (auto i : va) yv.push_back(y[i]);
  HeadFit<T> fit;
  for (double lr : cfg.lrs)
    for (double wd : cfg.wds) fit.cells.push_back({lr, wd});
  parallel_for(fit.cells.size(), cfg.threads ? cfg.threads : thread_budget(), [&](std::size_t i) {
    auto& c = fit.cells[i];
    try {
      auto h = train_linear_head(xt, yt, classes, {c.lr, c.wd, cfg.epochs, cfg.batch, cfg.seed});
      c.val_acc = accuracy(h.predict(xv), yv);
    } catch (const NumericalError&) {
      c.failed = true;
    }
  });
  const std::size_t best = pick_cell(fit.cells);
  if (best == fit.cells.size()) throw NumericalError("every grid cell diverged");
  fit.cell = fit.cells[best];
  fit.head = train_linear_head(x, y, classes, {fit.cell.lr, fit.cell.wd, cfg.epochs, cfg.batch, cfg.seed});
  return fit;
}

// Tape-retained bytes of one head-only step on fixed [batch, dim] inputs.
template <typename T>
std::size_t head_retained_bytes(std::size_t batch, std::size_t dim, std::size_t classes) {
  Graph<T> g;
  Var w = g.leaf(Tensor<T>({dim, classes}), true), b = g.leaf(Tensor<T>({classes}), true);
  Var logits = add_col_bias(g, matmul(g, g.constant(Tensor<T>({batch, dim})), w), b);
  cross_entropy(g, logits, std::vector<std::size_t>(batch, 0));
  return g.total_retained();
}

}  // namespace detail

/// One grid-searched run: select lr and wd on a seeded 80/20 split of the
/// training rows, retrain on all of them, report test accuracy.
template <typename T>
RunResult run_experiment(const ViTWeights<T>& backbone, const Dataset<T>& train, const Dataset<T>& test,
                         const ExperimentConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t C = train.classes;
  const StrategyConfig& sc = cfg.strategy;
  const ViTConfig& vc = backbone.config;
  RunResult res;
  res.strategy = strategy_name(sc.strategy);
  res.seed = cfg.seed;

  const auto rows = data_subset(train.size(), cfg.data_fraction, cfg.seed);
  std::vector<std::size_t> test_rows(test.size());
  std::iota(test_rows.begin(), test_rows.end(), 0);

  ProbeModel<T> proto(backbone, sc, C, cfg.seed);
  std::optional<FeatureCache<T>> train_cache, test_cache;
  if (cfg.cache && proto.cacheable()) {
    train_cache = build_cache(backbone, train, proto.queries().active);
    test_cache = build_cache(backbone, test, proto.queries().active);
  }
  const FeatureCache<T>* trc = train_cache ? &*train_cache : nullptr;
  const FeatureCache<T>* tec = test_cache ? &*test_cache : nullptr;
  const std::vector<std::size_t> y = train.labels_at(rows);

  auto finish = [&] {
    res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return res;
  };

  // Feature-level strategies: fixed features, optional selection, head grid.
  // `inserted` counts non-head parameters; head rows of the CLS block are
  // left out, matching count_tunable.
  auto select_and_fit = [&](ProbeModel<T>& m, std::size_t inserted) {
    Tensor<T> xtr = extract_features(m, train, rows, trc);
    Tensor<T> xte = extract_features(m, test, test_rows, tec);
    auto stdz = Standardizer<T>::fit(xtr);
    xtr = stdz.apply(xtr);
    xte = stdz.apply(xte);
    std::vector<std::size_t> kept(xtr.shape()[1]);
    std::iota(kept.begin(), kept.end(), 0);
    if (sc.fraction < 1.0) {
      SelectionConfig sel;
      sel.fraction = sc.fraction;
      sel.lambdas = cfg.lambdas;
      sel.lasso_steps = cfg.lasso_steps;
      sel.retrain = {cfg.lrs.back(), 0.0, cfg.epochs, cfg.batch, cfg.seed};
      sel.seed = cfg.seed;
      auto rep = select_features(xtr, y, C, m.feature_layout(), sel);
      kept = rep.kept;
      res.lambda = rep.lambda;
      res.selection = std::move(rep);
      xtr = select_columns(xtr, kept);
      xte = select_columns(xte, kept);
    }
    auto fit = detail::fit_head(xtr, y, C, cfg);
    res.cells = fit.cells;
    res.lr = fit.cell.lr;
    res.wd = fit.cell.wd;
    res.val_acc = fit.cell.val_acc;
    res.train_acc = accuracy(fit.head.predict(xtr), y);
    res.test_acc = accuracy(fit.head.predict(xte), test.labels);
    res.tunable_params = inserted + (kept.size() - m.feature_layout().cls) * C;
  };

  if (sc.strategy == Strategy::head2toe) {
    select_and_fit(proto, 0);
    res.retained_bytes = detail::head_retained_bytes<T>(std::min(cfg.batch, rows.size()), res.tunable_params / C, C);
    return finish();
  }

  auto [tr, va] = split_80_20(rows, cfg.seed);
  std::vector<GridCell> cells;
  for (double lr : cfg.lrs)
    for (double wd : cfg.wds) cells.push_back({lr, wd});
  parallel_for(cells.size(), cfg.threads ? cfg.threads : thread_budget(), [&](std::size_t i) {
    auto& c = cells[i];
    ProbeModel<T> m(backbone, sc, C, cfg.seed);
    try {
      train_probe(m, train, tr, {c.lr, c.wd, cfg.epochs, cfg.batch, cfg.seed}, trc);
      c.val_acc = evaluate(m, train, va, trc);
    } catch (const NumericalError&) {
      c.failed = true;
    }
  });
  const std::size_t best = pick_cell(cells);
  if (best == cells.size()) throw NumericalError("every grid cell diverged");
  res.cells = cells;
  res.lr = cells[best].lr;
  res.wd = cells[best].wd;
  res.val_acc = cells[best].val_acc;

  ProbeModel<T> m(backbone, sc, C, cfg.seed);
  auto stats = train_probe(m, train, rows, {res.lr, res.wd, cfg.epochs, cfg.batch, cfg.seed}, trc);
  res.retained_bytes = stats.peak_retained;
  if (uses_queries(sc.strategy) && sc.fraction < 1.0) {
    const std::size_t inserted = count_tunable(sc, vc, C) - (m.feature_dim() - m.feature_layout().cls) * C;
    const double lr = res.lr, wd = res.wd, val = res.val_acc;
    auto grid = res.cells;
    select_and_fit(m, inserted);
    // The reported hyperparameters remain those of the query training.
    res.lr = lr;
    res.wd = wd;
    res.val_acc = val;
    res.cells = grid;
    return finish();
  }
  res.train_acc = evaluate(m, train, rows, trc);
  res.test_acc = evaluate(m, test, test_rows, tec);
  res.tunable_params = count_tunable(sc, vc, C);
  return finish();
}

enum class SweepAxis { data_fraction, tokens, fraction, layers };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "data-fraction") return SweepAxis::data_fraction;
  if (s == "T") return SweepAxis::tokens;
  if (s == "F") return SweepAxis::fraction;
  if (s == "layers") return SweepAxis::layers;
  throw ConfigError("axis: unknown value '" + s + "'");
}

inline std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::data_fraction: return "data-fraction";
    case SweepAxis::tokens: return "T";
    case SweepAxis::fraction: return "F";
    case SweepAxis::layers: return "layers";
  }
  return "?";
}

/// One run per axis value. Layer values are mask strings ("all", "last:k").
template <typename T>
std::vector<RunResult> sweep(const ViTWeights<T>& backbone, const Dataset<T>& train, const Dataset<T>& test,
                             const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one axis value");
  std::vector<RunResult> out;
  for (const auto& v : values) {
    ExperimentConfig cfg = base;
    auto number = [&] {
      try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used == v.size()) return d;
      } catch (const std::exception&) {
      }
      throw ConfigError(axis_name(axis) + ": bad value '" + v + "'");
    };
    switch (axis) {
      case SweepAxis::data_fraction: cfg.data_fraction = number(); break;
      case SweepAxis::tokens: {
        const double t = number();
        if (t < 0 || t != std::floor(t)) throw ConfigError("T: bad value '" + v + "'");
        cfg.strategy.tokens = static_cast<std::size_t>(t);
        if (uses_prompts(cfg.strategy.strategy)) cfg.strategy.prompt_tokens = cfg.strategy.tokens;
        break;
      }
      case SweepAxis::fraction: cfg.strategy.fraction = number(); break;
      case SweepAxis::layers:
        parse_layer_mask(v, backbone.config.layers);
        cfg.strategy.layers = v;
        break;
    }
    RunResult r = run_experiment(backbone, train, test, cfg);
    r.axis = axis_name(axis);
    r.axis_value = v;
    out.push_back(std::move(r));
  }
  return out;
}

inline const char* kResultCsvHeader =
    "strategy,seed,axis,axis_value,hyperparams,train_acc,val_acc,test_acc,tunable_params,retained_bytes,wall_ms";

inline void write_csv_row(std::ostream& os, const RunResult& r) {
  std::ostringstream line;
  line << std::setprecision(6) << std::fixed;
  line << r.strategy << ',' << r.seed << ',' << r.axis << ',' << r.axis_value << ',';
  std::ostringstream hp;
  hp << r.hyperparams();
  line << hp.str() << ',' << r.train_acc << ',' << r.val_acc << ',' << r.test_acc << ',' << r.tunable_params << ','
       << r.retained_bytes << ',' << std::setprecision(1) << r.wall_ms;
  os << line.str() << '\n';
}

inline void write_csv(std::ostream& os, const std::vector<RunResult>& rows) {
  os << kResultCsvHeader << '\n';
  for (const auto& r : rows) write_csv_row(os, r);
}

}  // namespace vqt
