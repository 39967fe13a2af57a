// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "vqtlab/config.hpp"
#include "vqtlab/report.hpp"

namespace vqt {
namespace {

namespace fs = std::filesystem;

std::string error_of(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, DefaultsAndSeedFlow) {
  auto rc = parse_config(json::object());
  EXPECT_EQ(rc.task.teacher_seed, 1u);
  EXPECT_EQ(rc.task.data_seed, 2u);
  EXPECT_EQ(rc.experiment.lrs.size() * rc.experiment.wds.size(), 20u);
  EXPECT_EQ(rc.experiment.strategy.strategy, Strategy::vqt);
  rc = parse_config({{"seed", 7}, {"task", {{"data_seed", 40}}}});
  EXPECT_EQ(rc.experiment.seed, 7u);
  EXPECT_EQ(rc.pretrain.seed, 7u);
  EXPECT_EQ(rc.task.teacher_seed, 8u);
  EXPECT_EQ(rc.task.data_seed, 40u);
}

TEST(Config, ReadsEverySection) {
  json j = json::parse(R"({
    "seed": 2, "backbone": "teacher", "data_fraction": 0.5, "cache": false,
    "model": {"preset": "tiny", "mode": "paper", "layers": 3},
    "task": {"classes": 4, "train": 100, "test": 50, "signal_layer": 2, "noise": 0.1},
    "pretrain": {"steps": 10, "lr": 0.01},
    "train": {"lrs": [0.1], "wds": [0, 0.01], "epochs": 7, "batch": 32, "lambdas": [0.001]},
    "strategy": {"name": "vpt", "T": 3, "layers": "last:2", "pooling": {"window": 2, "stride": 2}},
    "sweep": {"axis": "layers", "values": ["last:1", "all"]},
    "profile": {"batch": 8, "budgets": [1e6], "strategies": ["vqt", "adaptformer+vqt"]}
  })");
  auto rc = parse_config(j);
  EXPECT_TRUE(rc.use_teacher);
  EXPECT_FALSE(rc.experiment.cache);
  EXPECT_EQ(rc.model().mode, Mode::paper);
  EXPECT_EQ(rc.model().layers, 3u);
  EXPECT_EQ(rc.task.layer(), 2u);
  EXPECT_EQ(rc.experiment.wds.size(), 2u);
  EXPECT_EQ(rc.experiment.strategy.strategy, Strategy::vpt);
  EXPECT_EQ(rc.experiment.strategy.prompt_tokens, 3u);
  EXPECT_EQ(rc.experiment.strategy.pooling.taps[0].window, 2u);
  EXPECT_EQ(rc.sweep_values.size(), 2u);
  ASSERT_EQ(rc.tradeoff_strategies.size(), 2u);
  EXPECT_EQ(rc.tradeoff_strategies[1], Strategy::adaptformer_vqt);
  EXPECT_EQ(config_json(rc)["strategy"]["name"], "vpt");
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(error_of({{"train", {{"epochz", 3}}}}).find("train.epochz"), std::string::npos);
  EXPECT_NE(error_of({{"strategy", {{"T", -1}}}}).find("strategy.T"), std::string::npos);
  EXPECT_NE(error_of({{"strategy", {{"T", 1.5}}}}).find("strategy.T"), std::string::npos);
  EXPECT_NE(error_of({{"strategy", {{"name", "vqt2"}}}}).find("strategy.name"), std::string::npos);
  EXPECT_NE(error_of({{"train", {{"lrs", {"fast"}}}}}).find("train.lrs"), std::string::npos);
  EXPECT_NE(error_of({{"cache", "yes"}}).find("cache"), std::string::npos);
  EXPECT_NE(error_of({{"model", {{"dim", 15}}}}).find("model"), std::string::npos);
  EXPECT_NE(error_of({{"sweep", {{"axis", "depth"}}}}).find("sweep.axis"), std::string::npos);
  EXPECT_NE(error_of({{"task", 3}}).find("task"), std::string::npos);
  EXPECT_THROW(parse_config({{"strategy", {{"layers", "last:9"}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"task", {{"signal_layer", 5}}}}), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/run.json"), FileError);
}

TEST(Report, LayerImportanceIsBlockMean) {
  SelectionReport s;
  s.scores = {1, 2, 3, 4, 10, 20, 7, 9};  // two blocks of 3, CLS block of 2
  FeatureLayout layout{2, 3, 2};
  json j = to_json(s, layout);
  auto li = importance_from_selection(json::parse(j.dump()));
  ASSERT_EQ(li.per_layer.size(), 2u);
  EXPECT_EQ(li.per_layer[0], 2.0);
  EXPECT_EQ(li.per_layer[1], 34.0 / 3.0);
  EXPECT_EQ(li.cls, 8.0);
  j["layout"]["block"] = 4;
  EXPECT_THROW(importance_from_selection(j), DimensionError);
  EXPECT_THROW(importance_from_selection(json::object()), FormatError);
}

TEST(Report, MemoryJsonCarriesCategories) {
  MemoryReport r;
  r.by_category[static_cast<std::size_t>(Category::query_branch)] = 12;
  r.peak_total = 12;
  json j = to_json(r);
  EXPECT_EQ(j["retained_by_category"]["query_branch"], 12);
  EXPECT_EQ(j["retained_by_category"]["backbone_main"], 0);
  EXPECT_EQ(j["peak_total"], 12);
}

// The CLI's exit codes per error class.
class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("vqtlab_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) {
    const std::string cmd = std::string(VQTLAB_CLI) + " " + args + " > " + (dir_ / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return (dir_ / name).string();
  }
  std::string out() const { return "--out " + (dir_ / "w").string(); }

  fs::path dir_;
};

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("probe --config " + write("bad.json", R"({"train": {"epochz": 1}})") + " " + out()), 2);
  EXPECT_EQ(run("probe --strategy bogus " + out()), 2);
  EXPECT_EQ(run("probe --cache maybe " + out()), 2);
  EXPECT_EQ(run("probe " + out()), 3);  // no weights yet
  const std::string cfg = write("tiny.json", R"({"task": {"train": 40, "test": 20, "pretext": 20},
    "train": {"lrs": [1e308], "wds": [0], "epochs": 1, "batch": 20}})");
  ASSERT_EQ(run("gen-task --config " + cfg + " " + out()), 0);
  EXPECT_EQ(run("probe --config " + cfg + " " + out()), 3);  // backbone not pre-trained yet
  std::ofstream(dir_ / "w" / "train.vqtd", std::ios::binary) << "VQTX";
  const std::string teacher = write("teacher.json", R"({"backbone": "teacher", "task": {"train": 40, "test": 20, "pretext": 20},
    "train": {"lrs": [0.1], "wds": [0], "epochs": 1, "batch": 20}})");
  EXPECT_EQ(run("probe --config " + teacher + " " + out()), 3);  // corrupt dataset
  ASSERT_EQ(run("gen-task --config " + cfg + " " + out()), 0);
  EXPECT_EQ(run("probe --config " + teacher + " --strategy linear " + out()), 0);
  const std::string diverge = write("t2.json", R"({"backbone": "teacher", "task": {"train": 40, "test": 20, "pretext": 20},
    "train": {"lrs": [1e308], "wds": [0], "epochs": 1, "batch": 20}})");
  EXPECT_EQ(run("probe --config " + diverge + " --strategy linear " + out()), 4);
  EXPECT_EQ(run("select --config " + teacher + " " + out()), 2);  // F = 1
}

}  // namespace
}  // namespace vqt
