// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "vqtlab/harness.hpp"

namespace vqt {

struct SyntheticTaskSpec {
  ViTConfig config = ViTConfig::tiny();
  std::uint64_t teacher_seed = 1;
  std::uint64_t data_seed = 2;
  std::size_t classes = 5;
  std::size_t train = 1000;
  std::size_t test = 500;
  std::size_t pretext = 1000;
  std::size_t pretext_classes = 10;
  std::size_t signal_layer = 0;  // k in [1, M]; 0 means M / 2
  double noise = 0.0;            // probability a label is replaced by a uniform draw
  double readout_scale = 4.0;    // sharpness of the planted readout on standardized features

  std::size_t layer() const { return signal_layer ? signal_layer : std::max<std::size_t>(1, config.layers / 2); }

  void validate() const {
    config.validate();
    if (layer() < 1 || layer() > config.layers) throw ConfigError("signal_layer must lie in [1, M]");
    if (classes < 2 || pretext_classes < 2) throw ConfigError("classes must be at least 2");
    if (train == 0 || test == 0) throw ConfigError("split sizes must be positive");
    if (!(noise >= 0 && noise <= 1)) throw ConfigError("noise must lie in [0, 1]");
  }
};

/// The planted readout: label = argmax(R (f - mu) / sigma + b) where f is the
/// token-mean of teacher Z_k. Kept so tests can reach the 100% ceiling.
template <typename T>
struct PlantedReadout {
  std::vector<double> mean, inv_std;
  Tensor<double> r;  // [C, D]
  std::vector<double> bias;

  std::vector<double> logits(std::span<const T> f) const {
    const std::size_t C = bias.size(), D = mean.size();
    std::vector<double> z(bias);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t d = 0; d < D; ++d) z[c] += r[c * D + d] * (f[d] - mean[d]) * inv_std[d];
    return z;
  }
  std::size_t label(std::span<const T> f) const {
    auto z = logits(f);
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }
};

template <typename T>
struct SyntheticTask {
  ViTWeights<T> teacher;
  Dataset<T> pretext, train, test;
  PlantedReadout<T> readout;
};

/// Token-mean of Z_k for every image: [n, D].
template <typename T>
Tensor<T> layer_token_means(ViTWeights<T>& w, const Tensor<T>& images, std::size_t k, std::size_t batch = 128) {
  const ViTConfig& c = w.config;
  const std::size_t n = images.shape()[0];
  Tensor<T> out({n, c.dim});
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t B = std::min(batch, n - s);
    std::vector<std::size_t> idx(B);
    std::iota(idx.begin(), idx.end(), s);
    Graph<T> g;
    typename Graph<T>::NoGrad off(g);
    Binder<T> bind;
    Var z = embed_patches(g, bind_embedding(g, w, false, bind),
                          g.constant(patchify(gather_leading(images, idx), c.patch_size)));
    for (std::size_t m = 0; m < k; ++m) z = layer_forward(g, bind_layer(g, w.layers[m], false, bind), z, c).output;
    const Tensor<T>& mean = g.value(mean_cols(g, z));  // [B, D, 1]
    std::copy(mean.values().begin(), mean.values().end(), out.data() + s * c.dim);
  }
  return out;
}

/// Final CLS vector for every image: [n, D].
template <typename T>
Tensor<T> final_cls(ViTWeights<T>& w, const Tensor<T>& images, std::size_t batch = 128) {
  const ViTConfig& c = w.config;
  const std::size_t n = images.shape()[0];
  Tensor<T> out({n, c.dim});
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t B = std::min(batch, n - s);
    std::vector<std::size_t> idx(B);
    std::iota(idx.begin(), idx.end(), s);
    Graph<T> g;
    typename Graph<T>::NoGrad off(g);
    Binder<T> bind;
    Var z = embed_patches(g, bind_embedding(g, w, false, bind),
                          g.constant(patchify(gather_leading(images, idx), c.patch_size)));
    for (auto& lw : w.layers) z = layer_forward(g, bind_layer(g, lw, false, bind), z, c).output;
    const Tensor<T>& cls = g.value(cls_vector(g, z));
    std::copy(cls.values().begin(), cls.values().end(), out.data() + s * c.dim);
  }
  return out;
}

namespace detail {

template <typename T>
Tensor<T> gaussian_images(const ViTConfig& c, std::size_t n, Rng& rng) {
  return normal_tensor<T>({n, c.channels, c.image_size, c.image_size}, 1.0, rng);
}

inline std::vector<std::size_t> argmax_rows(const Tensor<double>& z) {
  const std::size_t n = z.shape()[0], C = z.shape()[1];
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * C;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + C) - row);
  }
  return out;
}

// Nudges per-class offsets until every class takes roughly 1/C of the rows.
inline std::vector<double> balance_offsets(const Tensor<double>& z) {
  const std::size_t n = z.shape()[0], C = z.shape()[1];
  std::vector<double> b(C, 0.0);
  Tensor<double> shifted = z;
  for (int it = 0; it < 200; ++it) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < C; ++c) shifted[i * C + c] = z[i * C + c] + b[c];
    std::vector<double> count(C, 0.0);
    for (auto y : argmax_rows(shifted)) count[y] += 1;
    for (std::size_t c = 0; c < C; ++c) b[c] -= 0.1 * std::log((count[c] + 1) / (static_cast<double>(n) / C + 1));
  }
  return b;
}

}  // namespace detail

/// Teacher, pretext set (labels from a readout of teacher CLS) and
/// downstream train/test sets (labels from a readout of the token-mean of
/// teacher Z_k).
template <typename T>
SyntheticTask<T> gen_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  const ViTConfig& c = spec.config;
  SyntheticTask<T> task;
  task.teacher = ViTWeights<T>::random(c, spec.teacher_seed);
  Rng rng(spec.data_seed);

  // Pretext: random readout of the final CLS, offsets balanced.
  {
    Tensor<T> images = detail::gaussian_images<T>(c, spec.pretext, rng);
    Tensor<double> fwd_cls = final_cls(task.teacher, images).template cast<double>();
    Tensor<double> r = normal_tensor<double>({c.dim, spec.pretext_classes}, 1.0, rng);
    Graph<double> g;
    typename Graph<double>::NoGrad off(g);
    Tensor<double> z = g.value(matmul(g, g.constant(fwd_cls), g.constant(r)));
    auto b = detail::balance_offsets(z);
    for (std::size_t i = 0; i < spec.pretext; ++i)
      for (std::size_t k = 0; k < spec.pretext_classes; ++k) z[i * spec.pretext_classes + k] += b[k];
    task.pretext = {std::move(images), detail::argmax_rows(z), spec.pretext_classes};
  }

  // Downstream: one pool so train and test share the readout.
  const std::size_t n = spec.train + spec.test;
  Tensor<T> images = detail::gaussian_images<T>(c, n, rng);
  Tensor<T> f = layer_token_means(task.teacher, images, spec.layer());
  auto stdz = Standardizer<T>::fit(f);
  auto& ro = task.readout;
  ro.mean = stdz.mean;
  ro.inv_std = stdz.inv_std;
  ro.r = normal_tensor<double>({spec.classes, c.dim}, spec.readout_scale / std::sqrt(double(c.dim)), rng);
  ro.bias.assign(spec.classes, 0.0);
  Tensor<double> z({n, spec.classes});
  for (std::size_t i = 0; i < n; ++i) {
    auto l = ro.logits(std::span<const T>(f.data() + i * c.dim, c.dim));
    std::copy(l.begin(), l.end(), z.data() + i * spec.classes);
  }
  ro.bias = detail::balance_offsets(z);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = ro.label(std::span<const T>(f.data() + i * c.dim, c.dim));
    if (spec.noise > 0 && rng.bernoulli(spec.noise)) labels[i] = rng.index(spec.classes);
  }
  std::vector<std::size_t> tr(spec.train), te(spec.test);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(te.begin(), te.end(), spec.train);
  Dataset<T> pool{std::move(images), std::move(labels), spec.classes};
  task.train = pool.subset(tr);
  task.test = pool.subset(te);
  return task;
}

struct PretrainOptions {
  std::size_t steps = 300;
  std::size_t batch = 64;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

/// Light supervised pre-training of every backbone weight on the pretext
/// set; the pretext head is discarded.
template <typename T>
ViTWeights<T> pretrain(const ViTWeights<T>& init, const Dataset<T>& pretext, const PretrainOptions& opt) {
  StrategyConfig sc;
  sc.strategy = Strategy::finetune;
  ProbeModel<T> m(init, sc, pretext.classes, opt.seed);
  const std::size_t n = pretext.size();
  const std::size_t epochs = (opt.steps * opt.batch + n - 1) / n;
  Adam<T> adam({.lr = opt.lr, .weight_decay = opt.weight_decay, .horizon = opt.steps});
  Rng rng(opt.seed);
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs && step < opt.steps; ++e) {
    auto order = rng.permutation(n);
    for (std::size_t s = 0; s < n && step < opt.steps; s += opt.batch, ++step) {
      std::span<const std::size_t> b(order.data() + s, std::min(opt.batch, n - s));
      Graph<T> g;
      Binder<T> bind;
      Var loss = m.loss(g, bind, make_batch(pretext, b, init.config.patch_size), pretext.labels_at(b));
      g.backward(loss);
      std::vector<Tensor<T>*> params;
      std::vector<const Tensor<T>*> grads;
      for (const auto& entry : bind.entries()) {
        params.push_back(entry.tensor);
        grads.push_back(g.grad(entry.var));
      }
      adam.step(params, grads);
    }
  }
  return m.weights();
}

}  // namespace vqt
