// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary containers. All integers are u32 little-endian and all tensor data
// is float32 little-endian, row-major.
//
// VQTW (backbone weights), version 1:
//   "VQTW" | version | D M H N mlp_ratio patch image channels mode
//   then for each tensor in ViTWeights::layout order:
//   rank | dims[rank] | data
//   optionally followed by a QTOK trailer (see vqt.hpp).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "vqtlab/vit.hpp"

namespace vqt {

inline constexpr std::uint32_t kWeightsVersion = 1;

namespace io {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void tag(const char (&t)[5]) { buf_.insert(buf_.end(), t, t + 4); }

  template <typename T>
  void tensor(const Tensor<T>& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) u32(static_cast<std::uint32_t>(e));
    for (T v : t.values()) f32(static_cast<float>(v));
  }

  const std::vector<char>& bytes() const { return buf_; }

  void write_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FileError("cannot open '" + path + "' for writing");
    f.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw FileError("write to '" + path + "' failed");
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> data) : buf_(std::move(data)) {}

  static Reader from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FileError("cannot open '" + path + "'");
    return Reader(std::vector<char>(std::istreambuf_iterator<char>(f), {}));
  }

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t position() const { return pos_; }

  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
    return v;
  }
  float f32(const std::string& field) { return std::bit_cast<float>(u32(field)); }

  std::string tag(const std::string& field) {
    need(4, field);
    std::string s(buf_.data() + pos_, 4);
    pos_ += 4;
    return s;
  }
  bool peek_tag(const char (&t)[5]) const {
    return buf_.size() - pos_ >= 4 && std::equal(t, t + 4, buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
  }

  /// Reads a tensor record and checks it against `expected`.
  template <typename T>
  Tensor<T> tensor(const std::string& name, const Shape& expected) {
    const std::uint32_t rank = u32(name + ".rank");
    if (rank > 8) throw FormatError("tensor '" + name + "': implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = u32(name + ".dims");
    if (shape != expected) {
      throw FormatError("tensor '" + name + "': stored shape " + to_string(shape) + " does not match expected " +
                        to_string(expected));
    }
    const std::size_t n = numel(shape);
    need(4 * n, name + ".data");
    std::vector<T> data(n);
    for (auto& v : data) v = static_cast<T>(f32(name));
    return Tensor<T>(std::move(shape), std::move(data));
  }

 private:
  void need(std::size_t n, const std::string& field) const {
    if (buf_.size() - pos_ < n) throw FormatError("truncated file while reading " + field);
  }

  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

inline void write_config(Writer& w, const ViTConfig& c) {
  for (std::size_t v : {c.dim, c.layers, c.heads, c.patches(), c.mlp_ratio, c.patch_size, c.image_size, c.channels})
    w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(c.mode));
}

inline ViTConfig read_config(Reader& r) {
  ViTConfig c;
  c.dim = r.u32("config.D");
  c.layers = r.u32("config.M");
  c.heads = r.u32("config.H");
  const std::uint32_t n = r.u32("config.N");
  c.mlp_ratio = r.u32("config.mlp_ratio");
  c.patch_size = r.u32("config.patch");
  c.image_size = r.u32("config.image");
  c.channels = r.u32("config.channels");
  const std::uint32_t mode = r.u32("config.mode");
  if (mode > 1) throw FormatError("config.mode: unknown value " + std::to_string(mode));
  c.mode = static_cast<Mode>(mode);
  try {
    c.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("config block: ") + e.what());
  }
  if (c.patches() != n) throw FormatError("config.N: stored " + std::to_string(n) + " inconsistent with image/patch");
  return c;
}

}  // namespace io

template <typename T>
void write_weights(io::Writer& w, ViTWeights<T>& weights) {
  w.tag("VQTW");
  w.u32(kWeightsVersion);
  io::write_config(w, weights.config);
  weights.for_each([&](const std::string&, Tensor<T>& t) { w.tensor(t); });
}

template <typename T>
void save_weights(ViTWeights<T>& weights, const std::string& path) {
  io::Writer w;
  write_weights(w, weights);
  w.write_file(path);
}

/// Reads the header and tensors. With `expected`, every tensor is checked
/// against that config's layout, so a file from another config fails on the
/// first tensor whose shape differs.
template <typename T>
ViTWeights<T> read_weights(io::Reader& r, const ViTConfig* expected = nullptr) {
  const std::string magic = r.tag("magic");
  if (magic != "VQTW") throw FormatError("magic: expected VQTW");
  const std::uint32_t version = r.u32("version");
  if (version != kWeightsVersion) throw FormatError("version: unsupported " + std::to_string(version));
  ViTWeights<T> out;
  out.config = io::read_config(r);
  const ViTConfig& layout_cfg = expected ? *expected : out.config;
  auto layout = ViTWeights<T>::layout(layout_cfg);
  std::vector<Tensor<T>> tensors;
  for (const auto& [name, shape] : layout) tensors.push_back(r.tensor<T>(name, shape));
  if (expected && !(*expected == out.config)) {
    throw FormatError("config block does not match the expected configuration");
  }
  out.patch_w = std::move(tensors[0]);
  out.patch_b = std::move(tensors[1]);
  out.cls = std::move(tensors[2]);
  out.pos = std::move(tensors[3]);
  std::size_t i = 4;
  for (std::size_t m = 0; m < out.config.layers; ++m) {
    LayerWeights<T> lw;
    lw.for_each([&](const char*, Tensor<T>& t) { t = std::move(tensors[i++]); });
    out.layers.push_back(std::move(lw));
  }
  return out;
}

template <typename T>
ViTWeights<T> load_weights(const std::string& path, const ViTConfig* expected = nullptr) {
  io::Reader r = io::Reader::from_file(path);
  return read_weights<T>(r, expected);
}

}  // namespace vqt
