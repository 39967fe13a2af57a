// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

// vqtlab: generate a synthetic task, pre-train the backbone, then probe,
// select, sweep and profile strategies on it. All files live in --out.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "vqtlab/config.hpp"
#include "vqtlab/report.hpp"

namespace fs = std::filesystem;
using namespace vqt;

namespace {

using Real = float;

struct Flags {
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;
  std::string strategy, layers, cache;
  std::size_t tokens = 0;
  double fraction = 1.0, data_fraction = 1.0;
  std::string axis;
  std::vector<std::string> values;
  std::vector<double> budgets;
  bool layer_importance = false;
  std::string selection;

  CLI::Option *seed_opt = nullptr, *tokens_opt = nullptr, *fraction_opt = nullptr, *data_fraction_opt = nullptr;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run configuration");
  sub->add_option("--out", f.out, "working directory for inputs and outputs");
  f.seed_opt = sub->add_option("--seed", f.seed, "seed for task, pre-training and probing");
  sub->add_option("--strategy", f.strategy, "linear|finetune|vqt|vpt|head2toe|adaptformer|vpt+vqt|adaptformer+vqt");
  f.tokens_opt = sub->add_option("--T", f.tokens, "query (or prompt) tokens per layer");
  f.fraction_opt = sub->add_option("--F", f.fraction, "fraction of features kept by selection");
  sub->add_option("--layers", f.layers, "last:k or all");
  f.data_fraction_opt = sub->add_option("--data-fraction", f.data_fraction, "fraction of training rows used");
  sub->add_option("--cache", f.cache, "feature cache")->check(CLI::IsMember({"on", "off"}));
}

RunConfig resolve(const Flags& f) {
  RunConfig rc;
  if (!f.config.empty()) {
    rc = load_config(f.config);
  } else {
    rc.set_seed(0);
  }
  StrategyConfig& s = rc.experiment.strategy;
  if (f.seed_opt->count()) rc.set_seed(f.seed);
  if (!f.strategy.empty()) {
    s.strategy = parse_strategy(f.strategy);
    if (uses_prompts(s.strategy)) s.prompt_tokens = s.tokens;
  }
  if (f.tokens_opt->count()) {
    s.tokens = f.tokens;
    if (uses_prompts(s.strategy)) s.prompt_tokens = f.tokens;
  }
  if (f.fraction_opt->count()) s.fraction = f.fraction;
  if (!f.layers.empty()) s.layers = f.layers;
  if (f.data_fraction_opt->count()) rc.experiment.data_fraction = f.data_fraction;
  if (!f.cache.empty()) rc.experiment.cache = f.cache == "on";
  if (!f.axis.empty()) rc.sweep_axis = f.axis;
  if (!f.values.empty()) rc.sweep_values = f.values;
  if (!f.budgets.empty()) rc.budgets = f.budgets;
  rc.validate();
  return rc;
}

struct Paths {
  fs::path dir;
  std::string file(const char* name) const { return (dir / name).string(); }
};

ViTWeights<Real> load_backbone(const RunConfig& rc, const Paths& p) {
  return load_weights<Real>(p.file(rc.use_teacher ? "teacher.vqtw" : "backbone.vqtw"), &rc.model());
}

void write_results(const Paths& p, const std::vector<RunResult>& rows) {
  std::ofstream out(p.file("results.csv"));
  if (!out) throw FileError("cannot write " + p.file("results.csv"));
  write_csv(out, rows);
}

json run_json(const RunConfig& rc, const std::string& command, const std::vector<RunResult>& rows) {
  json results = json::array();
  for (const auto& r : rows) results.push_back(to_json(r));
  return {{"command", command}, {"config", config_json(rc)}, {"results", results}};
}

void print_summary(const std::vector<RunResult>& rows) {
  for (const auto& r : rows) {
    std::cout << r.strategy;
    if (r.axis != "none") std::cout << " " << r.axis << "=" << r.axis_value;
    std::cout << "  test_acc " << r.test_acc << "  tunable " << r.tunable_params << "  retained " << r.retained_bytes
              << " B  " << r.hyperparams() << "\n";
  }
}

int gen_task_cmd(const RunConfig& rc, const Paths& p) {
  auto task = gen_task<Real>(rc.task);
  save_weights(task.teacher, p.file("teacher.vqtw"));
  save_dataset(task.pretext, p.file("pretext.vqtd"));
  save_dataset(task.train, p.file("train.vqtd"));
  save_dataset(task.test, p.file("test.vqtd"));
  std::cout << "wrote teacher, pretext (" << task.pretext.size() << "), train (" << task.train.size() << "), test ("
            << task.test.size() << ") to " << p.dir.string() << "\n";
  return 0;
}

int pretrain_cmd(const RunConfig& rc, const Paths& p) {
  auto teacher = load_weights<Real>(p.file("teacher.vqtw"), &rc.model());
  auto pretext = load_dataset<Real>(p.file("pretext.vqtd"));
  auto backbone = pretrain(teacher, pretext, rc.pretrain);
  save_weights(backbone, p.file("backbone.vqtw"));
  std::cout << "pre-trained " << rc.pretrain.steps << " steps -> " << p.file("backbone.vqtw") << "\n";
  return 0;
}

int probe_cmd(const RunConfig& rc, const Paths& p, bool select) {
  const auto& sc = rc.experiment.strategy;
  if (select) {
    if (!(sc.strategy == Strategy::head2toe || uses_queries(sc.strategy)))
      throw ConfigError("strategy: select needs head2toe or a query strategy");
    if (!(sc.fraction < 1.0)) throw ConfigError("F: select needs F < 1");
  }
  auto backbone = load_backbone(rc, p);
  auto train = load_dataset<Real>(p.file("train.vqtd"));
  auto test = load_dataset<Real>(p.file("test.vqtd"));
  auto r = run_experiment(backbone, train, test, rc.experiment);
  write_results(p, {r});
  write_json_file(p.file("run.json"), run_json(rc, select ? "select" : "probe", {r}));
  if (r.selection) {
    ProbeModel<Real> m(backbone, sc, train.classes, rc.seed);
    write_json_file(p.file("selection.json"), to_json(*r.selection, m.feature_layout()));
  }
  print_summary({r});
  return 0;
}

// Trials run in parallel; each writes its own file and the rows are merged
// in axis order afterwards.
int sweep_cmd(const RunConfig& rc, const Paths& p) {
  if (rc.sweep_values.empty()) throw ConfigError("sweep.values: no axis values given");
  const SweepAxis axis = parse_axis(rc.sweep_axis);
  auto backbone = load_backbone(rc, p);
  auto train = load_dataset<Real>(p.file("train.vqtd"));
  auto test = load_dataset<Real>(p.file("test.vqtd"));
  const fs::path trials = p.dir / "trials";
  fs::create_directories(trials);
  const std::size_t n = rc.sweep_values.size();
  const std::size_t threads = rc.experiment.threads ? rc.experiment.threads : thread_budget();
  ExperimentConfig base = rc.experiment;
  if (threads > 1 && n > 1) base.threads = 1;
  auto trial_file = [&](std::size_t i) { return (trials / ("trial_" + std::to_string(i) + ".csv")).string(); };
  std::vector<RunResult> rows(n);
  parallel_for(n, threads, [&](std::size_t i) {
    rows[i] = sweep(backbone, train, test, base, axis, {rc.sweep_values[i]}).front();
    std::ofstream out(trial_file(i));
    if (!out) throw FileError("cannot write " + trial_file(i));
    write_csv_row(out, rows[i]);
  });
  std::ofstream out(p.file("results.csv"));
  if (!out) throw FileError("cannot write " + p.file("results.csv"));
  out << kResultCsvHeader << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    std::ifstream in(trial_file(i));
    out << in.rdbuf();
  }
  write_json_file(p.file("run.json"), run_json(rc, "sweep", rows));
  print_summary(rows);
  return 0;
}

int profile_cmd(const RunConfig& rc, const Paths& p) {
  auto backbone = load_backbone(rc, p);
  auto train = load_dataset<Real>(p.file("train.vqtd"));
  const std::size_t B = std::min(rc.profile_batch, train.size());
  std::vector<std::size_t> idx(B);
  std::iota(idx.begin(), idx.end(), 0);
  ProbeModel<Real> m(backbone, rc.experiment.strategy, train.classes, rc.seed);
  auto rep = profile_step(m, make_batch(train, idx, backbone.config.patch_size), train.labels_at(idx));
  json j = to_json(rep);
  j["strategy"] = strategy_name(rc.experiment.strategy.strategy);
  j["batch"] = B;
  write_json_file(p.file("memory.json"), j);
  std::cout << j.dump(2) << "\n";
  if (!rc.budgets.empty()) {
    auto test = load_dataset<Real>(p.file("test.vqtd"));
    auto strategies = rc.tradeoff_strategies;
    if (strategies.empty()) strategies.push_back(rc.experiment.strategy.strategy);
    auto points = measure_tradeoff(backbone, train, test, rc.experiment, strategies);
    std::ofstream out(p.file("tradeoff.csv"));
    if (!out) throw FileError("cannot write " + p.file("tradeoff.csv"));
    write_tradeoff_csv(out, tradeoff_table(points, rc.budgets));
  }
  return 0;
}

int report_cmd(const Flags& f, const Paths& p) {
  if (f.layer_importance) {
    const std::string src = f.selection.empty() ? p.file("selection.json") : f.selection;
    json j = to_json(importance_from_selection(read_json_file(src)));
    write_json_file(p.file("layer_importance.json"), j);
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::ifstream in(p.file("results.csv"));
  if (!in) throw FileError("cannot open " + p.file("results.csv"));
  std::cout << in.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-token probing of a frozen vision transformer on synthetic tasks"};
  app.require_subcommand(1);
  Flags f;
  std::vector<CLI::App*> subs;
  for (const char* name : {"gen-task", "pretrain", "probe", "select", "sweep", "profile"}) {
    auto* sub = app.add_subcommand(name);
    add_common(sub, f);
    subs.push_back(sub);
  }
  subs[0]->description("generate teacher weights and the pretext, train and test sets");
  subs[1]->description("pre-train the teacher on the pretext set");
  subs[2]->description("grid-search and train one strategy, then test it");
  subs[3]->description("probe with group-lasso feature selection (F < 1)");
  subs[4]->description("one probe per axis value");
  subs[5]->description("memory accounting of one training step");
  subs[4]->add_option("--axis", f.axis, "data-fraction|T|F|layers");
  subs[4]->add_option("--values", f.values, "axis values")->delimiter(',');
  subs[5]->add_option("--budgets", f.budgets, "byte budgets for the trade-off table")->delimiter(',');
  auto* report = app.add_subcommand("report", "print results, or per-layer importance of a selection");
  report->add_option("--out", f.out, "working directory");
  report->add_flag("--layer-importance", f.layer_importance, "block means of the stored selection scores");
  report->add_option("--selection", f.selection, "selection.json to read (default: <out>/selection.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    Paths p{f.out};
    fs::create_directories(p.dir);
    if (report->parsed()) return report_cmd(f, p);
    // Rebind the shared option pointers to the subcommand that ran.
    for (auto* sub : subs)
      if (sub->parsed()) {
        f.seed_opt = sub->get_option("--seed");
        f.tokens_opt = sub->get_option("--T");
        f.fraction_opt = sub->get_option("--F");
        f.data_fraction_opt = sub->get_option("--data-fraction");
      }
    const RunConfig rc = resolve(f);
    if (subs[0]->parsed()) return gen_task_cmd(rc, p);
    if (subs[1]->parsed()) return pretrain_cmd(rc, p);
    if (subs[2]->parsed()) return probe_cmd(rc, p, false);
    if (subs[3]->parsed()) return probe_cmd(rc, p, true);
    if (subs[4]->parsed()) return sweep_cmd(rc, p);
    if (subs[5]->parsed()) return profile_cmd(rc, p);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FileError& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
