// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "vqtlab/aggregation.hpp"

namespace vqt {
namespace {

using Td = Tensor<double>;

ViTConfig cfg(std::size_t D = 6) {
  ViTConfig c;
  c.dim = D;
  c.heads = 2;
  c.layers = 3;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 1;
  return c;
}

TEST(Within, SingleTokenIsIdentity) {
  Rng rng(1);
  Td z = normal_tensor<double>({6, 1}, 1.0, rng);
  Td w({1}, 0.8);
  for (Within mode : {Within::none, Within::mean}) {
    EXPECT_TRUE(bitwise_equal(aggregate_within(z, {mode, Across::concat}), z));
  }
  Td one({1}, 1.0);
  EXPECT_TRUE(bitwise_equal(aggregate_within(z, {Within::weighted, Across::concat}, &one), z));
}

TEST(Within, UniformWeightsEqualMeanPool) {
  // T = 4 keeps 1/T exact in binary, so the two reductions agree bit for bit.
  Rng rng(2);
  Td z = normal_tensor<double>({6, 4}, 1.0, rng);
  Td w({4}, 0.25);
  Td weighted = aggregate_within(z, {Within::weighted, Across::concat}, &w);
  Td mean = aggregate_within(z, {Within::mean, Across::concat});
  EXPECT_TRUE(bitwise_equal(weighted, mean));
}

TEST(Within, OneHotSelectsColumn) {
  Rng rng(3);
  Td z = normal_tensor<double>({6, 3}, 1.0, rng);
  Td w = Td::vector({0, 1, 0});
  Td out = aggregate_within(z, {Within::weighted, Across::concat}, &w);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out[i], z.at(i, 1));
  Td bad = Td::vector({1, 0});
  EXPECT_THROW(aggregate_within(z, {Within::weighted, Across::concat}, &bad), ContractError);
}

TEST(Across, OneHotReproducesSingleLayer) {
  auto c = cfg();
  Rng rng(4);
  std::vector<Td> layers;
  for (int m = 0; m < 3; ++m) layers.push_back(normal_tensor<double>({6, 2}, 1.0, rng));
  Td cls = normal_tensor<double>({6}, 1.0, rng);
  AggregationPlan plan{Within::none, Across::weighted};
  auto weights = AggregatorWeights<double>::init(plan, c, 3, 2, 0);
  weights.across = Td::vector({0, 0, 1});
  Td out = aggregate_across(layers, cls, plan, c, &weights);
  Td single = aggregate_across(std::vector<Td>{layers[2]}, cls, {Within::none, Across::concat}, c);
  EXPECT_TRUE(bitwise_equal(out, single));
}

TEST(Across, WeightedMatchesExplicitSum) {
  auto c = cfg();
  Rng rng(5);
  std::vector<Td> layers;
  for (int m = 0; m < 3; ++m) layers.push_back(normal_tensor<double>({6, 2}, 1.0, rng));
  Td cls = normal_tensor<double>({6}, 1.0, rng);
  AggregationPlan plan{Within::none, Across::weighted};
  auto weights = AggregatorWeights<double>::init(plan, c, 3, 2, 0);
  weights.across = Td::vector({0.2, -1.3, 0.7});
  Td out = aggregate_across(layers, cls, plan, c, &weights);
  ASSERT_EQ(out.size(), 6u * 2 + 6);
  for (std::size_t d = 0; d < 6; ++d)
    for (std::size_t t = 0; t < 2; ++t) {
      double s = 0;
      for (std::size_t m = 0; m < 3; ++m) s += weights.across[m] * layers[m].at(d, t);
      EXPECT_EQ(out[d * 2 + t], s);
    }
  for (std::size_t d = 0; d < 6; ++d) EXPECT_EQ(out[12 + d], cls[d]);
}

TEST(Across, ConcatDimensionsAndLayout) {
  AggregationPlan plan;
  EXPECT_EQ(plan.feature_dim(768, 12, 1), 9984u);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t M = 1 + rng.index(12), D = 2 + rng.index(40), T = 1 + rng.index(5);
    EXPECT_EQ(plan.feature_dim(D, M, T), M * D * T + D);
  }
  EXPECT_EQ((AggregationPlan{Within::mean, Across::concat}.feature_dim(8, 3, 5)), 3u * 8 + 8);
  EXPECT_EQ((AggregationPlan{Within::none, Across::weighted}.feature_dim(8, 3, 5)), 8u * 5 + 8);
  EXPECT_EQ((AggregationPlan{Within::none, Across::trans_layer}.feature_dim(8, 3, 5)), 8u);
}

TEST(Across, TransLayerOutputsClsColumn) {
  auto c = cfg();
  Rng rng(7);
  std::vector<Td> layers;
  for (int m = 0; m < 3; ++m) layers.push_back(normal_tensor<double>({6, 2}, 1.0, rng));
  Td cls = normal_tensor<double>({6}, 1.0, rng);
  AggregationPlan plan{Within::none, Across::trans_layer};
  auto weights = AggregatorWeights<double>::init(plan, c, 3, 2, 8);
  Td out = aggregate_across(layers, cls, plan, c, &weights);
  ASSERT_EQ(out.size(), 6u);
  // Oracle: the full-mode layer over [cls | Z'_1 | Z'_2 | Z'_3], column 0.
  Td tokens({6, 7});
  for (std::size_t d = 0; d < 6; ++d) {
    tokens.at(d, 0) = cls[d];
    for (std::size_t m = 0; m < 3; ++m)
      for (std::size_t t = 0; t < 2; ++t) tokens.at(d, 1 + 2 * m + t) = layers[m].at(d, t);
  }
  Td z = layer_forward(tokens, weights.trans[0], c).z_next;
  for (std::size_t d = 0; d < 6; ++d) EXPECT_EQ(out[d], z.at(d, 0));
}

TEST(Across, TransLayerGradientsReachAggregatorNotBackbone) {
  auto c = cfg();
  auto backbone = ViTWeights<double>::random(c, 9);
  AggregationPlan plan{Within::none, Across::trans_layer};
  auto agg = AggregatorWeights<double>::init(plan, c, 2, 1, 10);
  Rng rng(11);
  Graph<double> g;
  Binder<double> bind;
  LayerVars frozen = bind_layer(g, backbone.layers[0], false, bind);
  LayerVars trans = bind_layer(g, agg.trans[0], true, bind);
  Var z = g.constant(normal_tensor<double>({2, 6, 5}, 1.0, rng));
  LayerTrace tr = layer_forward(g, frozen, z, c);
  std::vector<Var> per_layer{slice_cols(g, tr.output, 1, 2), slice_cols(g, tr.output, 2, 3)};
  Var feats = aggregate_across(g, per_layer, cls_vector(g, tr.output), plan, c, {}, &trans);
  g.backward(cross_entropy(g, feats, {0, 3}));
  EXPECT_TRUE(g.has_grad(trans.wq));
  EXPECT_TRUE(g.has_grad(trans.w2));
  EXPECT_FALSE(g.has_grad(frozen.wq));
  EXPECT_EQ(bind.entries().size(), 16u);
}

TEST(Plan, Parse) {
  EXPECT_EQ(AggregationPlan::parse_within("mean"), Within::mean);
  EXPECT_EQ(AggregationPlan::parse_across("trans_layer"), Across::trans_layer);
  EXPECT_THROW(AggregationPlan::parse_across("sum"), ConfigError);
}

}  // namespace
}  // namespace vqt
