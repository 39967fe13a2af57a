// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numeric>

#include "vqtlab/probe.hpp"

namespace vqt {

namespace {

using Td = Tensor<double>;

Dataset<double> random_images(const ViTConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset<double> d;
  d.images = normal_tensor<double>({n, c.channels, c.image_size, c.image_size}, 1.0, rng);
  d.classes = 3;
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(i % 3);
  return d;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

Td run_features(ProbeModel<double>& m, const Batch<double>& b) {
  Graph<double> g;
  Binder<double> bind;
  return g.value(m.features(g, bind, b));
}

StrategyConfig with(Strategy s) {
  StrategyConfig sc;
  sc.strategy = s;
  return sc;
}

TEST(CountTunable, AdapterTable) {
  auto c = ViTConfig::vit_b();
  StrategyConfig s = with(Strategy::adaptformer);
  EXPECT_EQ(count_tunable(s, c, 50), 1'179'648u);
  s.strategy = Strategy::adaptformer_vqt;
  s.tokens = 2;
  EXPECT_EQ(count_tunable(s, c, 50), 2'119'680u);
  s.tokens = 4;
  EXPECT_EQ(count_tunable(s, c, 50), 3'059'712u);
}

TEST(CountTunable, OtherStrategies) {
  auto c = ViTConfig::vit_b();
  EXPECT_EQ(count_tunable(with(Strategy::linear), c, 10), 7680u);
  StrategyConfig v = with(Strategy::vqt);
  EXPECT_EQ(count_tunable(v, c, 10), 1u * 768 * 12 + 1u * 768 * 12 * 10);
  v.layers = "last:3";
  EXPECT_EQ(count_tunable(v, c, 10), 1u * 768 * 3 * 11);
  StrategyConfig p = with(Strategy::vpt);
  p.prompt_tokens = 5;
  EXPECT_EQ(count_tunable(p, c, 10), 5u * 768 * 12);
  EXPECT_EQ(count_tunable(with(Strategy::head2toe), c, 10, 1000), 10'000u);
  EXPECT_GT(count_tunable(with(Strategy::finetune), c, 10), 85'000'000u);
}

TEST(Cache, ByteEstimate) {
  auto c = ViTConfig::vit_b();
  EXPECT_EQ(cache_bytes_per_image(c, 12, CacheLayout::layer_input), 7'262'208u);
  EXPECT_EQ(cache_bytes_per_image(c, 12, CacheLayout::layer_input) * 1000, 7'262'208'000u);
  EXPECT_EQ(cache_bytes_per_image(c, 12, CacheLayout::key_value), 2u * 7'262'208u);
}

TEST(Cache, CachedFeaturesBitwiseEqualRecomputed) {
  for (Mode mode : {Mode::paper, Mode::full}) {
    auto c = ViTConfig::tiny(mode);
    auto w = ViTWeights<double>::random(c, 1);
    auto data = random_images(c, 7, 2);
    StrategyConfig s = with(Strategy::vqt);
    s.tokens = 3;
    ProbeModel<double> m(w, s, 3, 5);
    auto cache = build_cache(w, data, m.queries().active, 3);
    auto idx = std::vector<std::size_t>{6, 0, 3};
    Td direct = run_features(m, make_batch(data, idx, c.patch_size));
    Td cached = run_features(m, make_batch(data, idx, c.patch_size, &cache));
    EXPECT_TRUE(bitwise_equal(direct, cached));
  }
}

TEST(Cache, RefusedForFeatureModifyingStrategies) {
  auto c = ViTConfig::tiny();
  auto w = ViTWeights<double>::random(c, 1);
  auto data = random_images(c, 2, 2);
  auto cache = build_cache(w, data, std::vector<bool>(c.layers, true));
  for (Strategy s : {Strategy::vpt, Strategy::adaptformer, Strategy::finetune, Strategy::adaptformer_vqt}) {
    ProbeModel<double> m(w, with(s), 3);
    EXPECT_FALSE(m.cacheable());
    EXPECT_THROW(run_features(m, make_batch(data, iota(2), c.patch_size, &cache)), ContractError);
  }
}

TEST(Lattice, DegenerateStrategiesMatchPlainBackbone) {
  for (Mode mode : {Mode::paper, Mode::full}) {
    auto c = ViTConfig::tiny(mode);
    auto w = ViTWeights<double>::random(c, 3);
    auto data = random_images(c, 4, 4);
    auto b = make_batch(data, iota(4), c.patch_size);
    ProbeModel<double> linear(w, with(Strategy::linear), 3);
    Td plain = run_features(linear, b);

    StrategyConfig vpt = with(Strategy::vpt);
    vpt.prompt_tokens = 0;
    ProbeModel<double> m1(w, vpt, 3);
    EXPECT_TRUE(bitwise_equal(run_features(m1, b), plain));

    StrategyConfig ad = with(Strategy::adaptformer);
    ad.adapter_scale = 0.0;
    ProbeModel<double> m2(w, ad, 3);
    Rng rng(9);
    for (auto& u : m2.adapters().up) u = uniform_tensor<double>(u.shape(), 1.0, rng);
    EXPECT_TRUE(bitwise_equal(run_features(m2, b), plain));

    StrategyConfig none = with(Strategy::vqt);
    none.tokens = 0;
    ProbeModel<double> m3(w, none, 3);
    EXPECT_EQ(m3.query_layers(), 0u);
    EXPECT_TRUE(bitwise_equal(run_features(m3, b), plain));
  }
}

TEST(Combination, ZeroAdaptersPlusQueriesEqualsVqt) {
  auto c = ViTConfig::tiny();
  auto w = ViTWeights<double>::random(c, 5);
  auto data = random_images(c, 3, 6);
  auto b = make_batch(data, iota(3), c.patch_size);
  StrategyConfig v = with(Strategy::vqt);
  v.tokens = 2;
  StrategyConfig av = v;
  av.strategy = Strategy::adaptformer_vqt;
  ProbeModel<double> a(w, v, 3, 11), bm(w, av, 3, 11);
  EXPECT_TRUE(bitwise_equal(run_features(a, b), run_features(bm, b)));
}

TEST(Gradients, FrozenStrategiesNeverTouchBackbone) {
  auto c = ViTConfig::tiny();
  auto w = ViTWeights<double>::random(c, 7);
  auto data = random_images(c, 4, 8);
  auto b = make_batch(data, iota(4), c.patch_size);
  for (Strategy s : {Strategy::linear, Strategy::vqt, Strategy::head2toe, Strategy::vpt, Strategy::adaptformer,
                     Strategy::finetune}) {
    ProbeModel<double> m(w, with(s), 3);
    auto backbone = m.backbone_tensors();
    Graph<double> g;
    Binder<double> bind;
    g.backward(cross_entropy(g, m.logits(g, bind, b), data.labels));
    std::size_t touched = 0;
    for (auto& e : bind.entries()) {
      EXPECT_TRUE(g.has_grad(e.var)) << strategy_name(s);
      touched += backbone.count(e.tensor);
    }
    if (s == Strategy::finetune) {
      EXPECT_EQ(touched, backbone.size());
    } else {
      EXPECT_EQ(touched, 0u) << strategy_name(s);
    }
  }
}

TEST(ProbeModel, FeatureDimensions) {
  auto c = ViTConfig::tiny();
  auto w = ViTWeights<double>::random(c, 1);
  StrategyConfig v = with(Strategy::vqt);
  v.tokens = 2;
  ProbeModel<double> m(w, v, 3);
  EXPECT_EQ(m.feature_dim(), c.layers * c.dim * 2 + c.dim);
  EXPECT_EQ(m.feature_layout().size(), m.feature_dim());
  auto data = random_images(c, 2, 3);
  EXPECT_EQ(run_features(m, make_batch(data, iota(2), c.patch_size)).shape(), (Shape{2, m.feature_dim()}));
  ProbeModel<double> h(w, with(Strategy::head2toe), 3);
  EXPECT_EQ(run_features(h, make_batch(data, iota(2), c.patch_size)).shape(), (Shape{2, h.feature_dim()}));
  EXPECT_THROW(parse_strategy("lora"), ConfigError);
  EXPECT_EQ(parse_strategy("adaptformer+vqt"), Strategy::adaptformer_vqt);
}

}  // namespace
}  // namespace vqt
