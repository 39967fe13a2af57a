// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

// Small end-to-end run: planted task, linear probe vs query tokens, and the
// memory each one keeps for backward.

#include <iostream>

#include "vqtlab/memory.hpp"
#include "vqtlab/synthetic.hpp"

int main() {
  using namespace vqt;
  SyntheticTaskSpec spec;
  spec.train = 300;
  spec.test = 200;
  spec.pretext = 64;
  auto task = gen_task<float>(spec);
  std::cout << "signal planted at layer " << spec.layer() << " of " << spec.config.layers << "\n";

  std::vector<std::size_t> idx(32);
  std::iota(idx.begin(), idx.end(), 0);
  auto batch = make_batch(task.train, idx, spec.config.patch_size);

  for (Strategy s : {Strategy::linear, Strategy::vqt, Strategy::vpt}) {
    ExperimentConfig cfg;
    cfg.strategy.strategy = s;
    cfg.lrs = {0.5, 0.1};
    cfg.wds = {0.0};
    cfg.epochs = 5;
    auto r = run_experiment(task.teacher, task.train, task.test, cfg);

    ProbeModel<float> m(task.teacher, cfg.strategy, task.train.classes);
    auto mem = profile_step(m, batch, task.train.labels_at(idx));
    std::cout << strategy_name(s) << ": test acc " << r.test_acc << ", tunable " << r.tunable_params
              << ", retained " << mem.peak_total << " B (backbone path " << mem.category(Category::backbone_main)
              << " B)\n";
  }
}
