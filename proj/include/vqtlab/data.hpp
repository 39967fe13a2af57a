// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// VQTD (labelled image set), version 1:
//   "VQTD" | version | count | C | H | W | classes
//   count * C * H * W float32 pixels | count u32 labels

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "vqtlab/serialize.hpp"

namespace vqt {

inline constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
struct Dataset {
  Tensor<T> images;  // [n, C, H, W]
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (images.rank() != 4 || images.shape()[0] != labels.size()) {
      throw DimensionError("dataset images " + to_string(images.shape()) + " do not match " +
                           std::to_string(labels.size()) + " labels");
    }
    for (auto y : labels)
      if (y >= classes) throw FormatError("label " + std::to_string(y) + " out of range for " +
                                          std::to_string(classes) + " classes");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.images = gather_leading(images, idx);
    for (auto i : idx) d.labels.push_back(labels.at(i));
    d.classes = classes;
    return d;
  }

  std::vector<std::size_t> labels_at(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
  }

  template <typename U>
  Dataset<U> cast() const {
    return Dataset<U>{images.template cast<U>(), labels, classes};
  }
};

template <typename T>
void save_dataset(const Dataset<T>& d, const std::string& path) {
  d.validate();
  io::Writer w;
  w.tag("VQTD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(d.size()));
  for (std::size_t i = 1; i < 4; ++i) w.u32(static_cast<std::uint32_t>(d.images.shape()[i]));
  w.u32(static_cast<std::uint32_t>(d.classes));
  for (T v : d.images.values()) w.f32(static_cast<float>(v));
  for (auto y : d.labels) w.u32(static_cast<std::uint32_t>(y));
  w.write_file(path);
}

template <typename T>
Dataset<T> load_dataset(const std::string& path) {
  io::Reader r = io::Reader::from_file(path);
  if (r.tag("magic") != "VQTD") throw FormatError("magic: expected VQTD");
  const auto version = r.u32("version");
  if (version != kDatasetVersion) throw FormatError("version: unsupported " + std::to_string(version));
  const std::size_t n = r.u32("count"), c = r.u32("channels"), h = r.u32("height"), w = r.u32("width");
  Dataset<T> d;
  d.classes = r.u32("classes");
  if (n == 0 || c == 0 || h == 0 || w == 0 || d.classes < 2) throw FormatError("header: empty or degenerate dataset");
  std::vector<T> pix(n * c * h * w);
  for (auto& v : pix) v = static_cast<T>(r.f32("pixels"));
  d.images = Tensor<T>({n, c, h, w}, std::move(pix));
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(r.u32("labels"));
  if (!r.at_end()) throw FormatError("trailing bytes after labels");
  if (!d.images.all_finite()) throw FormatError("pixels: non-finite value");
  d.validate();
  return d;
}

}  // namespace vqt
