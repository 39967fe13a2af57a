// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>

#include "json.hpp"
#include "vqtlab/memory.hpp"

namespace vqt {

inline json to_json(const MemoryReport& r) {
  json cats = json::object();
  for (std::size_t c = 0; c < kCategoryCount; ++c)
    cats[std::string(category_name(static_cast<Category>(c)))] = r.by_category[c];
  return {{"retained_by_category", cats},     {"activation_bytes", r.activation_bytes},
          {"grad_buffer_bytes", r.grad_buffer_bytes}, {"peak_total", r.peak_total},
          {"tunable_param_bytes", r.tunable_param_bytes}, {"activation_bytes_by_layer", r.by_layer}};
}

inline json to_json(const LayerImportance& li) { return {{"per_layer", li.per_layer}, {"cls", li.cls}}; }

inline json to_json(const FeatureLayout& l) { return {{"layers", l.layers}, {"block", l.block}, {"cls", l.cls}}; }

inline FeatureLayout layout_from_json(const json& j) {
  try {
    return {j.at("layers").get<std::size_t>(), j.at("block").get<std::size_t>(), j.at("cls").get<std::size_t>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("layout: ") + e.what());
  }
}

inline json to_json(const SelectionReport& s, const FeatureLayout& layout) {
  return {{"fraction", s.fraction},       {"lambda", s.lambda},
          {"cls_always_kept", s.cls_always_kept}, {"layout", to_json(layout)},
          {"kept", s.kept},               {"scores", s.scores},
          {"layer_importance", to_json(s.importance)}};
}

inline json to_json(const RunResult& r) {
  json cells = json::array();
  for (const auto& c : r.cells) cells.push_back({{"lr", c.lr}, {"wd", c.wd}, {"val_acc", c.val_acc}, {"failed", c.failed}});
  json j = {{"strategy", r.strategy},
            {"seed", r.seed},
            {"axis", r.axis},
            {"axis_value", r.axis_value},
            {"lr", r.lr},
            {"wd", r.wd},
            {"train_acc", r.train_acc},
            {"val_acc", r.val_acc},
            {"test_acc", r.test_acc},
            {"tunable_params", r.tunable_params},
            {"retained_bytes", r.retained_bytes},
            {"grid", cells}};
  if (r.lambda) j["lambda"] = *r.lambda;
  return j;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

/// Per-layer block means recomputed from a stored selection.
inline LayerImportance importance_from_selection(const json& sel) {
  if (!sel.contains("scores") || !sel.contains("layout")) throw FormatError("selection needs 'scores' and 'layout'");
  std::vector<double> scores;
  try {
    scores = sel.at("scores").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("scores: ") + e.what());
  }
  return layer_importance(scores, layout_from_json(sel.at("layout")));
}

}  // namespace vqt
