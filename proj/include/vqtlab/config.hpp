// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration as JSON. Every section and key is optional; absent keys
// keep their defaults. Unknown keys and wrongly typed values raise
// ConfigError naming the offending field.
//
//   {
//     "seed": 0,
//     "backbone": "pretrained" | "teacher",
//     "data_fraction": 1.0,
//     "cache": true,
//     "model":    { "preset": "tiny" | "vit_b", "dim", "layers", "heads", "image_size",
//                   "patch_size", "channels", "mlp_ratio", "mode": "full" | "paper" },
//     "task":     { "teacher_seed", "data_seed", "classes", "train", "test", "pretext",
//                   "pretext_classes", "signal_layer", "noise", "readout_scale" },
//     "pretrain": { "steps", "batch", "lr", "weight_decay" },
//     "train":    { "lrs": [..], "wds": [..], "epochs", "batch", "lambdas": [..],
//                   "lasso_steps", "threads" },
//     "strategy": { "name", "T", "prompt_tokens", "layers", "bottleneck", "adapter_scale",
//                   "F", "within", "across", "pooling": "68k" | {"window", "stride"} },
//     "sweep":    { "axis": "data-fraction" | "T" | "F" | "layers", "values": [..] },
//     "profile":  { "batch", "budgets": [..], "strategies": [..] }
//   }
//
// task.teacher_seed and task.data_seed default to seed + 1 and seed + 2.

#include <fstream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "vqtlab/synthetic.hpp"

namespace vqt {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

using json = nlohmann::json;

struct RunConfig {
  std::uint64_t seed = 0;
  bool use_teacher = false;  // probe the raw teacher instead of the pre-trained backbone
  SyntheticTaskSpec task;
  PretrainOptions pretrain;
  ExperimentConfig experiment;
  std::string sweep_axis = "T";
  std::vector<std::string> sweep_values;
  std::size_t profile_batch = 64;
  std::vector<double> budgets;
  std::vector<Strategy> tradeoff_strategies;

  // Seeds flow from `seed` unless the task section pinned its own.
  bool teacher_seed_set = false, data_seed_set = false;

  void set_seed(std::uint64_t s) {
    seed = s;
    experiment.seed = s;
    pretrain.seed = s;
    if (!teacher_seed_set) task.teacher_seed = s + 1;
    if (!data_seed_set) task.data_seed = s + 2;
  }

  const ViTConfig& model() const { return task.config; }

  void validate() const {
    task.validate();
    experiment.validate();
    parse_layer_mask(experiment.strategy.layers, task.config.layers);
    if (pretrain.batch == 0) throw ConfigError("pretrain.batch must be positive");
    if (profile_batch == 0) throw ConfigError("profile.batch must be positive");
  }
};

namespace detail {

// Reads keys of one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* raw(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, std::size_t& out) {
    if (auto* v = raw(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0))
        throw ConfigError(field(key) + ": expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, double& out) {
    if (auto* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (auto* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (auto* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (auto* v = raw(key)) {
      if (!v->is_array()) throw ConfigError(field(key) + ": expected an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) throw ConfigError(field(key) + ": expected an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  // Numbers are kept in their JSON spelling so sweep values echo verbatim.
  void get(const char* key, std::vector<std::string>& out) {
    if (auto* v = raw(key)) {
      if (!v->is_array()) throw ConfigError(field(key) + ": expected an array");
      out.clear();
      for (const auto& e : *v) {
        if (e.is_string()) out.push_back(e.get<std::string>());
        else if (e.is_number()) out.push_back(e.dump());
        else throw ConfigError(field(key) + ": expected strings or numbers");
      }
    }
  }

  Section sub(const char* key) {
    used_.insert(key);
    return Section(j_.at(key), field(key));
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

  // Wrong enum spellings are reported against the field, not the parser.
  template <typename F>
  auto parse(const char* key, F&& f) {
    try {
      return f();
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(field(it.key().c_str()) + ": unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_model(Section s, ViTConfig& c) {
  std::string preset;
  s.get("preset", preset);
  if (!preset.empty()) {
    if (preset == "tiny") c = ViTConfig::tiny();
    else if (preset == "vit_b") c = ViTConfig::vit_b();
    else throw ConfigError("model.preset: unknown value '" + preset + "' (tiny, vit_b)");
  }
  s.get("dim", c.dim);
  s.get("layers", c.layers);
  s.get("heads", c.heads);
  s.get("image_size", c.image_size);
  s.get("patch_size", c.patch_size);
  s.get("channels", c.channels);
  s.get("mlp_ratio", c.mlp_ratio);
  std::string mode = c.mode == Mode::paper ? "paper" : "full";
  s.get("mode", mode);
  if (mode == "paper") c.mode = Mode::paper;
  else if (mode == "full") c.mode = Mode::full;
  else throw ConfigError("model.mode: unknown value '" + mode + "' (full, paper)");
  s.finish();
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

inline void read_strategy(Section s, StrategyConfig& sc) {
  std::string name = strategy_name(sc.strategy);
  s.get("name", name);
  sc.strategy = s.parse("name", [&] { return parse_strategy(name); });
  s.get("T", sc.tokens);
  if (uses_prompts(sc.strategy)) sc.prompt_tokens = sc.tokens;
  s.get("prompt_tokens", sc.prompt_tokens);
  s.get("layers", sc.layers);
  s.get("bottleneck", sc.bottleneck);
  s.get("adapter_scale", sc.adapter_scale);
  s.get("F", sc.fraction);
  std::string within = "none", across = "concat";
  s.get("within", within);
  s.get("across", across);
  sc.aggregation.within = s.parse("within", [&] { return AggregationPlan::parse_within(within); });
  sc.aggregation.across = s.parse("across", [&] { return AggregationPlan::parse_across(across); });
  if (const json* p = s.raw("pooling")) {
    if (p->is_string()) {
      sc.pooling = s.parse("pooling", [&] { return PoolingPlan::preset(p->get<std::string>()); });
    } else {
      Section ps(*p, s.field("pooling"));
      std::size_t window = 4, stride = 4;
      ps.get("window", window);
      ps.get("stride", stride);
      ps.finish();
      if (window == 0 || stride == 0) throw ConfigError("strategy.pooling: window and stride must be positive");
      sc.pooling = PoolingPlan::uniform(window, stride);
    }
  }
  s.finish();
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
  RunConfig rc;
  detail::Section root(j, "");
  std::uint64_t seed = 0;
  root.get("seed", seed);
  std::string backbone = "pretrained";
  root.get("backbone", backbone);
  if (backbone == "teacher") rc.use_teacher = true;
  else if (backbone != "pretrained") throw ConfigError("backbone: unknown value '" + backbone + "' (pretrained, teacher)");
  root.get("data_fraction", rc.experiment.data_fraction);
  root.get("cache", rc.experiment.cache);

  if (root.has("model")) detail::read_model(root.sub("model"), rc.task.config);
  if (root.has("task")) {
    auto s = root.sub("task");
    rc.teacher_seed_set = s.has("teacher_seed");
    rc.data_seed_set = s.has("data_seed");
    s.get("teacher_seed", rc.task.teacher_seed);
    s.get("data_seed", rc.task.data_seed);
    s.get("classes", rc.task.classes);
    s.get("train", rc.task.train);
    s.get("test", rc.task.test);
    s.get("pretext", rc.task.pretext);
    s.get("pretext_classes", rc.task.pretext_classes);
    s.get("signal_layer", rc.task.signal_layer);
    s.get("noise", rc.task.noise);
    s.get("readout_scale", rc.task.readout_scale);
    s.finish();
  }
  if (root.has("pretrain")) {
    auto s = root.sub("pretrain");
    s.get("steps", rc.pretrain.steps);
    s.get("batch", rc.pretrain.batch);
    s.get("lr", rc.pretrain.lr);
    s.get("weight_decay", rc.pretrain.weight_decay);
    s.finish();
  }
  if (root.has("train")) {
    auto s = root.sub("train");
    auto& e = rc.experiment;
    s.get("lrs", e.lrs);
    s.get("wds", e.wds);
    s.get("epochs", e.epochs);
    s.get("batch", e.batch);
    s.get("lambdas", e.lambdas);
    s.get("lasso_steps", e.lasso_steps);
    s.get("threads", e.threads);
    s.finish();
  }
  if (root.has("strategy")) detail::read_strategy(root.sub("strategy"), rc.experiment.strategy);
  if (root.has("sweep")) {
    auto s = root.sub("sweep");
    s.get("axis", rc.sweep_axis);
    s.parse("axis", [&] { return parse_axis(rc.sweep_axis); });
    s.get("values", rc.sweep_values);
    s.finish();
  }
  if (root.has("profile")) {
    auto s = root.sub("profile");
    s.get("batch", rc.profile_batch);
    s.get("budgets", rc.budgets);
    std::vector<std::string> names;
    s.get("strategies", names);
    for (const auto& n : names) rc.tradeoff_strategies.push_back(s.parse("strategies", [&] { return parse_strategy(n); }));
    s.finish();
  }
  root.finish();
  rc.set_seed(seed);
  rc.validate();
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Effective configuration for run reports. Pooling is spelled out per tap,
/// so this is a record rather than an input file.
inline json config_json(const RunConfig& rc) {
  const ViTConfig& c = rc.task.config;
  const auto& e = rc.experiment;
  const auto& s = e.strategy;
  json pooling = json::array();
  for (const auto& p : s.pooling.taps) pooling.push_back({{"window", p.window}, {"stride", p.stride}});
  std::vector<std::string> tradeoff;
  for (auto t : rc.tradeoff_strategies) tradeoff.push_back(strategy_name(t));
  const char* within[] = {"none", "mean", "weighted"};
  const char* across[] = {"concat", "weighted", "trans_layer"};
  return {
      {"seed", rc.seed},
      {"backbone", rc.use_teacher ? "teacher" : "pretrained"},
      {"data_fraction", e.data_fraction},
      {"cache", e.cache},
      {"model",
       {{"dim", c.dim}, {"layers", c.layers}, {"heads", c.heads}, {"image_size", c.image_size},
        {"patch_size", c.patch_size}, {"channels", c.channels}, {"mlp_ratio", c.mlp_ratio},
        {"mode", c.mode == Mode::paper ? "paper" : "full"}}},
      {"task",
       {{"teacher_seed", rc.task.teacher_seed}, {"data_seed", rc.task.data_seed}, {"classes", rc.task.classes},
        {"train", rc.task.train}, {"test", rc.task.test}, {"pretext", rc.task.pretext},
        {"pretext_classes", rc.task.pretext_classes}, {"signal_layer", rc.task.layer()}, {"noise", rc.task.noise},
        {"readout_scale", rc.task.readout_scale}}},
      {"pretrain",
       {{"steps", rc.pretrain.steps}, {"batch", rc.pretrain.batch}, {"lr", rc.pretrain.lr},
        {"weight_decay", rc.pretrain.weight_decay}}},
      {"train",
       {{"lrs", e.lrs}, {"wds", e.wds}, {"epochs", e.epochs}, {"batch", e.batch}, {"lambdas", e.lambdas},
        {"lasso_steps", e.lasso_steps}}},
      {"strategy",
       {{"name", strategy_name(s.strategy)}, {"T", s.tokens}, {"prompt_tokens", s.prompt_tokens}, {"layers", s.layers},
        {"bottleneck", s.bottleneck}, {"adapter_scale", s.adapter_scale}, {"F", s.fraction},
        {"within", within[static_cast<int>(s.aggregation.within)]},
        {"across", across[static_cast<int>(s.aggregation.across)]}, {"pooling_taps", pooling}}},
      {"sweep", {{"axis", rc.sweep_axis}, {"values", rc.sweep_values}}},
      {"profile", {{"batch", rc.profile_batch}, {"budgets", rc.budgets}, {"strategies", tradeoff}}},
  };
}

}  // namespace vqt
