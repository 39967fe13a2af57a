// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vqtlab/data.hpp"
#include "vqtlab/random.hpp"

namespace vqt {
namespace {

std::string temp_path(const char* name) { return (std::filesystem::temp_directory_path() / name).string(); }

Dataset<float> sample() {
  Rng rng(4);
  Dataset<float> d;
  d.images = normal_tensor<float>({5, 3, 4, 4}, 1.0, rng);
  d.labels = {0, 2, 1, 1, 0};
  d.classes = 3;
  return d;
}

TEST(Dataset, RoundTripBitwise) {
  auto d = sample();
  auto path = temp_path("vqtlab_ds_roundtrip.vqtd");
  save_dataset(d, path);
  auto back = load_dataset<float>(path);
  EXPECT_TRUE(bitwise_equal(back.images, d.images));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.classes, 3u);
  EXPECT_EQ(std::filesystem::file_size(path), 7u * 4 + 5 * 48 * 4 + 5 * 4);
  std::remove(path.c_str());
}

TEST(Dataset, TruncatedAndCorrupt) {
  auto d = sample();
  auto path = temp_path("vqtlab_ds_bad.vqtd");
  save_dataset(d, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_dataset<float>(path), FormatError);

  save_dataset(d, path);
  {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f.put('x');
  }
  EXPECT_THROW(load_dataset<float>(path), FormatError);

  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.write("XQTD", 4);
  }
  EXPECT_THROW(load_dataset<float>(path), FormatError);
  std::remove(path.c_str());
  EXPECT_THROW(load_dataset<float>(path), FileError);
}

TEST(Dataset, LabelOutOfRange) {
  auto d = sample();
  d.labels[2] = 3;
  EXPECT_THROW(d.validate(), FormatError);
}

TEST(Dataset, Subset) {
  auto d = sample();
  std::vector<std::size_t> idx{4, 1};
  auto s = d.subset(idx);
  EXPECT_EQ(s.labels, (std::vector<std::size_t>{0, 2}));
  for (std::size_t i = 0; i < 48; ++i) EXPECT_EQ(s.images[48 + i], d.images[48 + i]);
}

}  // namespace
}  // namespace vqt
