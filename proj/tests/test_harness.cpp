// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <limits>
#include <set>
#include <sstream>

#include "vqtlab/memory.hpp"
#include "vqtlab/synthetic.hpp"

namespace vqt {
namespace {

const SyntheticTask<double>& small_task() {
  static const SyntheticTask<double> task = [] {
    SyntheticTaskSpec spec;
    spec.train = 60;
    spec.test = 30;
    spec.pretext = 20;
    spec.classes = 3;
    return gen_task<double>(spec);
  }();
  return task;
}

ExperimentConfig quick(Strategy s) {
  ExperimentConfig cfg;
  cfg.strategy.strategy = s;
  cfg.lrs = {0.1};
  cfg.wds = {0.0};
  cfg.epochs = 2;
  cfg.batch = 16;
  cfg.seed = 3;
  cfg.threads = 1;
  return cfg;
}

TEST(Split, DeterministicAndDisjoint) {
  std::vector<std::size_t> idx(50);
  std::iota(idx.begin(), idx.end(), 100);
  auto [a1, b1] = split_80_20(idx, 7);
  auto [a2, b2] = split_80_20(idx, 7);
  EXPECT_EQ(a1, a2);
  EXPECT_EQ(b1, b2);
  EXPECT_EQ(a1.size(), 40u);
  EXPECT_EQ(b1.size(), 10u);
  std::set<std::size_t> all(a1.begin(), a1.end());
  all.insert(b1.begin(), b1.end());
  EXPECT_EQ(all.size(), 50u);
  EXPECT_EQ(*all.begin(), 100u);
  auto [a3, b3] = split_80_20(idx, 8);
  EXPECT_NE(a1, a3);
}

TEST(Grid, TieBreaksTowardLowerLrThenLowerWd) {
  std::vector<GridCell> cells{{0.5, 0.0, 0.8}, {0.1, 0.01, 0.8}, {0.1, 0.001, 0.8}, {1.0, 0.0, 0.7}};
  EXPECT_EQ(pick_cell(cells), 2u);
  cells[3].val_acc = 0.9;
  EXPECT_EQ(pick_cell(cells), 3u);
  cells[3].failed = true;
  EXPECT_EQ(pick_cell(cells), 2u);
  for (auto& c : cells) c.failed = true;
  EXPECT_EQ(pick_cell(cells), cells.size());
}

TEST(Grid, OneCellGridReturnsThatCell) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::linear);
  cfg.lrs = {0.25};
  cfg.wds = {0.001};
  auto r = run_experiment(t.teacher, t.train, t.test, cfg);
  ASSERT_EQ(r.cells.size(), 1u);
  EXPECT_EQ(r.lr, 0.25);
  EXPECT_EQ(r.wd, 0.001);
  EXPECT_EQ(r.tunable_params, 16u * 3);
}

TEST(Grid, DefaultGridHasTwentyCells) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::linear);
  cfg.lrs = ExperimentConfig{}.lrs;
  cfg.wds = ExperimentConfig{}.wds;
  cfg.epochs = 1;
  auto r = run_experiment(t.teacher, t.train, t.test, cfg);
  EXPECT_EQ(r.cells.size(), 20u);
}

TEST(Grid, DivergentCellsAreMarkedFailed) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::linear);
  const double inf = std::numeric_limits<double>::infinity();
  cfg.lrs = {inf, 0.1};
  cfg.wds = {0.0};
  auto r = run_experiment(t.teacher, t.train, t.test, cfg);
  ASSERT_EQ(r.cells.size(), 2u);
  EXPECT_TRUE(r.cells[0].failed);
  EXPECT_FALSE(r.cells[1].failed);
  EXPECT_EQ(r.lr, 0.1);
  cfg.lrs = {inf};
  EXPECT_THROW(run_experiment(t.teacher, t.train, t.test, cfg), NumericalError);
}

TEST(Grid, ReproducibleWinnerAndAccuracy) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::vqt);
  cfg.lrs = {0.5, 0.1};
  auto a = run_experiment(t.teacher, t.train, t.test, cfg);
  cfg.threads = 2;
  auto b = run_experiment(t.teacher, t.train, t.test, cfg);
  EXPECT_EQ(a.lr, b.lr);
  EXPECT_EQ(a.val_acc, b.val_acc);
  EXPECT_EQ(a.test_acc, b.test_acc);
  EXPECT_EQ(a.retained_bytes, b.retained_bytes);
}

TEST(Grid, CacheDoesNotChangeResults) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::vqt);
  auto a = run_experiment(t.teacher, t.train, t.test, cfg);
  cfg.cache = false;
  auto b = run_experiment(t.teacher, t.train, t.test, cfg);
  EXPECT_EQ(a.test_acc, b.test_acc);
  EXPECT_EQ(a.train_acc, b.train_acc);
}

TEST(Sweep, FullFractionEqualsPlainRun) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::vqt);
  auto plain = run_experiment(t.teacher, t.train, t.test, cfg);
  auto rows = sweep(t.teacher, t.train, t.test, cfg, SweepAxis::data_fraction, {"1.0", "0.5"});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].test_acc, plain.test_acc);
  EXPECT_EQ(rows[0].lr, plain.lr);
  EXPECT_EQ(rows[0].axis, "data-fraction");
  EXPECT_EQ(data_subset(10, 0.5, 1).size(), 5u);
}

TEST(Sweep, TokenAxisAndValidation) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::vqt);
  cfg.epochs = 1;
  auto rows = sweep(t.teacher, t.train, t.test, cfg, SweepAxis::tokens, {"1", "5", "10", "20", "40", "60"});
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[5].tunable_params, count_tunable([] {
              StrategyConfig s;
              s.tokens = 60;
              return s;
            }(),
                                                  t.teacher.config, 3));
  EXPECT_THROW(sweep(t.teacher, t.train, t.test, cfg, SweepAxis::tokens, {"1.5"}), ConfigError);
  EXPECT_THROW(sweep(t.teacher, t.train, t.test, cfg, SweepAxis::layers, {"last:9"}), ConfigError);
  EXPECT_THROW(parse_axis("depth"), ConfigError);
}

TEST(Sweep, LastLayerVqtRetainsLessThanAllLayers) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::vqt);
  cfg.epochs = 1;
  auto rows = sweep(t.teacher, t.train, t.test, cfg, SweepAxis::layers, {"last:1", "all"});
  EXPECT_LT(rows[0].retained_bytes, rows[1].retained_bytes);
}

TEST(FeatureLevel, SelectionShrinksHeadAndReportsLambda) {
  const auto& t = small_task();
  auto cfg = quick(Strategy::vqt);
  cfg.strategy.fraction = 0.5;
  cfg.lasso_steps = 50;
  auto r = run_experiment(t.teacher, t.train, t.test, cfg);
  ASSERT_TRUE(r.selection.has_value());
  ASSERT_TRUE(r.lambda.has_value());
  const auto& c = t.teacher.config;
  const std::size_t full = c.layers * c.dim + c.dim;
  EXPECT_EQ(r.selection->kept.size(), c.dim + (full - c.dim) / 2);
  EXPECT_EQ(r.tunable_params, c.layers * c.dim + (r.selection->kept.size() - c.dim) * 3);

  auto h = quick(Strategy::head2toe);
  h.strategy.fraction = 0.25;
  h.lasso_steps = 50;
  auto hr = run_experiment(t.teacher, t.train, t.test, h);
  const std::size_t dim = h.strategy.pooling.dimension(c);
  EXPECT_EQ(hr.tunable_params, static_cast<std::size_t>(std::llround(0.25 * dim)) * 3);
  EXPECT_GT(hr.retained_bytes, 0u);
}

TEST(Train, FinetuneMovesBackboneFrozenDoesNot) {
  const auto& t = small_task();
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  StrategyConfig s;
  s.strategy = Strategy::finetune;
  const auto wq = t.teacher.layers[0].wq;
  ProbeModel<double> ft(t.teacher, s, 3);
  // The head starts at zero, so the backbone first moves on the second step.
  train_probe(ft, t.train, idx, {.lr = 0.01, .epochs = 2, .batch = 16});
  EXPECT_FALSE(bitwise_equal(ft.weights().layers[0].wq, wq));
  EXPECT_TRUE(bitwise_equal(t.teacher.layers[0].wq, wq));
  s.strategy = Strategy::vpt;
  ProbeModel<double> vp(t.teacher, s, 3);
  const auto before = t.teacher.layers[2].w1;
  train_probe(vp, t.train, idx, {.lr = 0.01, .epochs = 1, .batch = 16});
  EXPECT_TRUE(bitwise_equal(t.teacher.layers[2].w1, before));
}

TEST(Csv, HeaderAndRow) {
  RunResult r;
  r.strategy = "vqt";
  r.seed = 4;
  r.lr = 0.5;
  r.wd = 0.001;
  r.test_acc = 0.75;
  r.tunable_params = 12;
  std::ostringstream os;
  write_csv(os, {r});
  EXPECT_EQ(os.str(),
            "strategy,seed,axis,axis_value,hyperparams,train_acc,val_acc,test_acc,tunable_params,retained_bytes,"
            "wall_ms\nvqt,4,none,,lr=0.5;wd=0.001,0.000000,0.000000,0.750000,12,0,0.0\n");
}

TEST(Config, Validation) {
  ExperimentConfig cfg;
  cfg.lrs.clear();
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.data_fraction = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.strategy.fraction = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

}  // namespace
}  // namespace vqt
