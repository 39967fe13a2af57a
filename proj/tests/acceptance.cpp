// Copyright (c) 2026 The vqtlab Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion; exit status is
// the number of failures. `--only k` runs criterion k alone.

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "vqtlab/config.hpp"
#include "vqtlab/memory.hpp"

namespace fs = std::filesystem;
using namespace vqt;

namespace {

using Td = Tensor<double>;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::vector<std::size_t> iota(std::size_t n, std::size_t from = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), from);
  return v;
}

ViTWeights<double> with_biases(const ViTConfig& c, std::uint64_t seed) {
  auto w = ViTWeights<double>::random(c, seed);
  Rng rng(seed ^ 0xb1a5);
  for (auto& l : w.layers)
    l.for_each([&](const char*, Td& t) {
      if (t.rank() == 1)
        for (auto& v : t.values()) v += rng.uniform(-0.3, 0.3);
    });
  return w;
}

Dataset<double> random_images(const ViTConfig& c, std::size_t n, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  Dataset<double> d;
  d.images = normal_tensor<double>({n, c.channels, c.image_size, c.image_size}, 1.0, rng);
  d.classes = classes;
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(rng.index(classes));
  return d;
}

// Z_0..Z_M and CLS with query columns recorded on the same tape as the
// backbone, queries as trainable leaves.
std::pair<std::vector<Td>, Td> forward_with_queries(ViTWeights<double>& w, const QueryTokenSet<double>& q,
                                                    const Td& image) {
  const ViTConfig& c = w.config;
  Graph<double> g;
  Binder<double> bind;
  std::vector<Td> zs;
  Var z = embed_patches(g, bind_embedding(g, w, false, bind), g.constant(patchify(image, c.patch_size)));
  zs.push_back(g.value(z));
  for (std::size_t m = 0; m < c.layers; ++m) {
    LayerVars lv = bind_layer(g, w.layers[m], false, bind);
    LayerTrace tr = layer_forward(g, lv, z, c);
    {
      auto s = g.scope(Category::query_branch, static_cast<int>(m));
      query_branch(g, lv, tr.k, tr.v, g.leaf(q.prompts[m], true), c);
    }
    z = tr.output;
    zs.push_back(g.value(z));
  }
  return {zs, g.value(cls_vector(g, z))};
}

Outcome intactness() {
  std::size_t compared = 0;
  for (Mode mode : {Mode::paper, Mode::full})
    for (std::size_t T : {1, 4}) {
      auto c = ViTConfig::tiny(mode);
      auto w = with_biases(c, 10 + T);
      Rng rng(20 + T);
      for (int trial = 0; trial < 3; ++trial) {
        Td image = normal_tensor<double>({c.channels, c.image_size, c.image_size}, 1.0, rng);
        auto q = QueryTokenSet<double>::random(c, T, std::vector<bool>(c.layers, true), rng.fork());
        for (auto& p : q.prompts) p = normal_tensor<double>(p.shape(), 2.0, rng);
        auto plain = forward(patch_embed(image, w), w);
        auto [zs, cls] = forward_with_queries(w, q, image);
        for (std::size_t m = 0; m <= c.layers; ++m, ++compared)
          if (!bitwise_equal(zs[m], plain.zs[m]))
            return {false, "Z_" + std::to_string(m) + " differs (mode " + std::to_string(int(mode)) + ", T=" +
                               std::to_string(T) + ")"};
        if (!bitwise_equal(cls, plain.cls) || !bitwise_equal(collect_features(image, w, q).cls, plain.cls))
          return {false, "CLS differs"};
        ++compared;
      }
    }
  return {true, std::to_string(compared) + " tensors bitwise equal across paper/full, T in {1,4}"};
}

Outcome pooling_special_case() {
  double worst = 0;
  for (Mode mode : {Mode::paper, Mode::full}) {
    auto c = ViTConfig::tiny(mode);
    auto w = with_biases(c, 31);
    Rng rng(32);
    for (std::size_t m = 0; m < c.layers; ++m) {
      auto& lw = w.layers[m];
      // Q' = 0 makes K^T Q' zero in every column: zero tokens in paper mode,
      // constant tokens (normalized to beta = 0) with zero query bias in full mode.
      Td p({c.dim, 3});
      if (mode == Mode::full) {
        lw.ln1_b.fill(0);
        lw.bq.fill(0);
        p.fill(0.7);
      } else {
        lw.bq.fill(0);
      }
      Td z = normal_tensor<double>({c.dim, c.tokens()}, 1.0, rng);
      auto r = vqt_layer_forward(z, p, lw, c);
      const Td& v = layer_forward(z, lw, c).trace.v;
      for (std::size_t i = 0; i < c.dim; ++i) {
        double mean = 0;
        for (std::size_t j = 0; j < v.cols(); ++j) mean += v.at(i, j);
        mean /= double(v.cols());
        for (std::size_t t = 0; t < 3; ++t) worst = std::max(worst, std::abs(r.attn.at(i, t) - mean));
      }
    }
  }
  return {worst <= 1e-12, "max |attn - mean_j V| = " + fmt(worst) + " (tol 1e-12)"};
}

// Central differences on every trainable tensor the model binds, against the
// tape's gradients. Heads and adapter up-projections are randomized first so
// that upstream gradients are nonzero.
Outcome gradient_check() {
  struct Case {
    std::string name;
    StrategyConfig sc;
  };
  std::vector<Case> cases;
  auto add = [&](const std::string& name, Strategy s, auto&& tweak) {
    StrategyConfig sc;
    sc.strategy = s;
    sc.tokens = 2;
    sc.prompt_tokens = 2;
    sc.bottleneck = 4;
    sc.pooling = PoolingPlan::uniform(4, 4);
    tweak(sc);
    cases.push_back({name, sc});
  };
  auto none = [](StrategyConfig&) {};
  add("linear head", Strategy::linear, none);
  add("vqt queries+head", Strategy::vqt, none);
  add("vqt weighted aggregation", Strategy::vqt, [](StrategyConfig& s) {
    s.aggregation = {Within::weighted, Across::weighted};
  });
  add("vqt trans_layer aggregation", Strategy::vqt, [](StrategyConfig& s) {
    s.aggregation = {Within::mean, Across::trans_layer};
  });
  add("vpt prompts+head", Strategy::vpt, none);
  add("adaptformer", Strategy::adaptformer, none);
  add("adaptformer+vqt", Strategy::adaptformer_vqt, none);
  add("vpt+vqt", Strategy::vpt_vqt, none);
  add("finetune subset", Strategy::finetune, none);
  add("head2toe head", Strategy::head2toe, none);

  const double h = 1e-5;
  const double kFloor = 1e-6;
  double worst = 0, worst_abs = 0;
  std::string worst_at;
  std::size_t coords = 0, vanishing = 0;
  for (Mode mode : {Mode::paper, Mode::full}) {
    auto c = ViTConfig::tiny(mode);
    auto w = with_biases(c, 41);
    auto data = random_images(c, 3, 3, 42);
    auto batch = make_batch(data, iota(3), c.patch_size);
    for (auto& cs : cases) {
      ProbeModel<double> m(w, cs.sc, 3, 43);
      Rng rng(44);
      m.head_w() = normal_tensor<double>(m.head_w().shape(), 0.5, rng);
      m.head_b() = normal_tensor<double>(m.head_b().shape(), 0.5, rng);
      for (auto& u : m.adapters().up)
        if (!u.empty()) u = normal_tensor<double>(u.shape(), 0.3, rng);

      Graph<double> g;
      Binder<double> bind;
      g.backward(m.loss(g, bind, batch, data.labels));
      auto eval = [&] {
        Graph<double> g2;
        typename Graph<double>::NoGrad off(g2);
        Binder<double> b2;
        return g2.value(m.loss(g2, b2, batch, data.labels))[0];
      };
      // Finetune binds every backbone tensor; a strided subset keeps it cheap.
      const std::size_t per_tensor = cs.sc.strategy == Strategy::finetune ? 6 : 48;
      for (const auto& e : bind.entries()) {
        Td& p = *e.tensor;
        const Td* ga = g.grad(e.var);
        const std::size_t stride = std::max<std::size_t>(1, p.size() / per_tensor);
        for (std::size_t i = 0; i < p.size(); i += stride, ++coords) {
          const double orig = p[i];
          p[i] = orig + h;
          const double fp = eval();
          p[i] = orig - h;
          const double fm = eval();
          p[i] = orig;
          const double num = (fp - fm) / (2 * h);
          const double ana = ga ? (*ga)[i] : 0.0;
          // Below the noise floor of central differences (roughly
          // eps * |loss| / h) a relative error is meaningless; such
          // coordinates, e.g. key biases under softmax shift invariance, are
          // held to an absolute bound instead.
          const double mag = std::max(std::abs(ana), std::abs(num));
          if (mag < kFloor) {
            ++vanishing;
            worst_abs = std::max(worst_abs, std::abs(ana - num));
            continue;
          }
          const double err = std::abs(ana - num) / mag;
          if (err > worst) {
            worst = err;
            worst_at = cs.name + (mode == Mode::paper ? " (paper)" : " (full)") + " a=" + fmt(ana) + " n=" + fmt(num);
          }
        }
      }
    }
  }
  return {worst < 1e-4 && worst_abs < 1e-9,
          std::to_string(coords) + " coordinates, max rel err " + fmt(worst, 3) + " at " + worst_at +
              " (tol 1e-4); " + std::to_string(vanishing) + " with |grad| < 1e-6, max abs err " + fmt(worst_abs, 3) +
              " (tol 1e-9)"};
}

Outcome backprop_bypass() {
  std::ostringstream os;
  bool ok = true;
  for (Mode mode : {Mode::paper, Mode::full})
    for (std::size_t T : {1, 4}) {
      auto c = ViTConfig::tiny(mode);
      auto w = with_biases(c, 51);
      auto data = random_images(c, 8, 5, 52);
      auto batch = make_batch(data, iota(8), c.patch_size);
      auto profile = [&](Strategy s, std::size_t& backbone_grads) {
        StrategyConfig sc;
        sc.strategy = s;
        sc.tokens = T;
        sc.prompt_tokens = T;
        ProbeModel<double> m(w, sc, 5, 53);
        Rng rng(54);
        m.head_w() = normal_tensor<double>(m.head_w().shape(), 0.5, rng);
        // Backward closure: no node recorded in the backbone's main path may
        // receive a gradient, and no backbone weight may be a trainable leaf.
        Graph<double> g;
        Binder<double> bind;
        g.backward(m.loss(g, bind, batch, data.labels));
        backbone_grads = 0;
        for (auto id : g.nodes_with_grad()) backbone_grads += g.node(id).category == Category::backbone_main;
        auto frozen = m.backbone_tensors();
        for (const auto& e : bind.entries()) backbone_grads += frozen.count(e.tensor);
        return profile_step(m, batch, data.labels);
      };
      std::size_t vqt_grads = 0, vpt_grads = 0;
      auto q = profile(Strategy::vqt, vqt_grads);
      auto p = profile(Strategy::vpt, vpt_grads);
      const bool row = vqt_grads == 0 && q.category(Category::backbone_main) == 0 &&
                       p.category(Category::backbone_main) > 0 && q.peak_total < p.peak_total;
      ok &= row;
      os << (mode == Mode::paper ? "paper" : "full") << " T=" << T << ": vqt " << q.peak_total << " B (backbone "
         << q.category(Category::backbone_main) << ", grads " << vqt_grads << ") vs vpt " << p.peak_total
         << " B (backbone " << p.category(Category::backbone_main) << "); ";
    }
  return {ok, os.str()};
}

Outcome parameter_table() {
  auto c = ViTConfig::vit_b();
  StrategyConfig s;
  s.strategy = Strategy::adaptformer;
  s.bottleneck = 64;
  const auto a = count_tunable(s, c, 50);
  s.strategy = Strategy::adaptformer_vqt;
  s.tokens = 2;
  const auto b = count_tunable(s, c, 50);
  s.tokens = 4;
  const auto d = count_tunable(s, c, 50);
  return {a == 1'179'648 && b == 2'119'680 && d == 3'059'712,
          std::to_string(a) + " / " + std::to_string(b) + " / " + std::to_string(d) +
              " (want 1179648 / 2119680 / 3059712)"};
}

Outcome feature_dimension() {
  Rng rng(61);
  std::ostringstream os;
  bool ok = true;
  for (int i = 0; i < 10; ++i) {
    ViTConfig c;
    c.layers = 1 + rng.index(5);
    c.heads = 1 + rng.index(2);
    c.dim = c.heads * (2 + rng.index(6));
    c.image_size = 8;
    c.patch_size = 4;
    c.channels = 1 + rng.index(3);
    c.mode = rng.bernoulli(0.5) ? Mode::paper : Mode::full;
    const std::size_t T = 1 + rng.index(6);
    const std::size_t want = c.layers * c.dim * T + c.dim;
    auto w = ViTWeights<double>::random(c, rng.fork());
    auto q = QueryTokenSet<double>::random(c, T, std::vector<bool>(c.layers, true), rng.fork());
    Td image = normal_tensor<double>({c.channels, c.image_size, c.image_size}, 1.0, rng);
    const std::size_t flat = collect_features(image, w, q).flat.size();
    StrategyConfig sc;
    sc.tokens = T;
    ProbeModel<double> m(w, sc, 2);
    const std::size_t declared = AggregationPlan{}.feature_dim(c.dim, c.layers, T);
    ok &= flat == want && declared == want && m.feature_dim() == want;
    os << "(" << c.layers << "," << c.dim << "," << T << ")=" << flat << " ";
  }
  const auto b = ViTConfig::vit_b();
  const std::size_t vb = AggregationPlan{}.feature_dim(b.dim, b.layers, 1);
  ok &= vb == 9984;
  os << "ViT-B T=1: " << vb;
  return {ok, os.str()};
}

Outcome storage_estimate() {
  const auto per = cache_bytes_per_image(ViTConfig::vit_b(), 12, CacheLayout::layer_input);
  const double gb = double(per) * 1000 / 1e9;
  const bool ok = per == 12u * 197 * 768 * 4 && per == 7'262'208u && std::abs(gb - 7.26) < 0.005;
  return {ok, std::to_string(per) + " B/image, " + fmt(gb, 4) + " GB per 1000 images"};
}

Outcome group_lasso_selection() {
  std::ostringstream os;
  bool ok = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed * 7919);
    const std::size_t n = 500, dim = 20;
    const std::size_t a = rng.index(dim);
    std::size_t b = rng.index(dim - 1);
    if (b >= a) ++b;
    Td x = normal_tensor<double>({n, dim}, 1.0, rng);
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i * dim + a] + 0.8 * x[i * dim + b] > 0 ? 1 : 0;
    const FeatureLayout layout{1, dim, 0};
    SelectionConfig sel;
    sel.fraction = 0.1;
    sel.seed = seed;
    auto rep = select_features(x, y, 2, layout, sel);
    auto top = select_fraction(rep.scores, 0.1);
    const bool top_ok = std::set<std::size_t>(top.begin(), top.end()) == std::set<std::size_t>{a, b};
    bool mono = true;
    std::vector<std::size_t> prev;
    for (double f : {0.1, 0.3, 0.7, 1.0}) {
      auto kept = select_with_cls(rep.scores, f, layout);
      mono &= std::includes(kept.begin(), kept.end(), prev.begin(), prev.end());
      prev = kept;
    }
    mono &= prev.size() == dim;
    ok &= top_ok && mono;
    os << "seed " << seed << ": informative {" << a << "," << b << "} top-2 {" << top[0] << "," << top[1]
       << "} nested " << (mono ? "yes" : "no") << "; ";
  }
  return {ok, os.str()};
}

// Layer-k planted task, teacher as the frozen backbone. Reduced grid: see README.
Outcome transfer_property() {
  const std::vector<std::string> names{"linear", "vqt", "adaptformer", "adaptformer+vqt"};
  std::map<std::string, double> mean;
  const int seeds = 5;
  for (int s = 1; s <= seeds; ++s) {
    SyntheticTaskSpec spec;
    spec.teacher_seed = s;
    spec.data_seed = 100 + s;
    auto task = gen_task<float>(spec);
    for (const auto& name : names) {
      ExperimentConfig cfg;
      cfg.strategy.strategy = parse_strategy(name);
      cfg.lrs = {0.5, 0.1};
      cfg.wds = {0.0};
      cfg.epochs = 6;
      cfg.seed = s;
      mean[name] += run_experiment(task.teacher, task.train, task.test, cfg).test_acc / seeds;
    }
  }
  const double lin = 100 * mean["linear"], v = 100 * mean["vqt"], ad = 100 * mean["adaptformer"],
               av = 100 * mean["adaptformer+vqt"];
  const bool ok = v - lin >= 5.0 && av >= std::max(ad, v) - 1.0;
  return {ok, "mean test acc: linear " + fmt(lin, 4) + ", vqt " + fmt(v, 4) + ", adaptformer " + fmt(ad, 4) +
                  ", adaptformer+vqt " + fmt(av, 4) + " (need vqt-linear >= 5, combo >= max - 1)"};
}

Outcome identity_lattice() {
  std::size_t checked = 0;
  for (Mode mode : {Mode::paper, Mode::full}) {
    auto c = ViTConfig::tiny(mode);
    auto w = with_biases(c, 71);
    auto data = random_images(c, 5, 3, 72);
    auto batch = make_batch(data, iota(5), c.patch_size);
    auto run = [&](const StrategyConfig& sc, bool scramble_up) {
      ProbeModel<double> m(w, sc, 3, 73);
      Rng rng(74), head_rng(75);
      if (scramble_up)
        for (auto& u : m.adapters().up) u = normal_tensor<double>(u.shape(), 1.0, rng);
      m.head_w() = normal_tensor<double>(m.head_w().shape(), 1.0, head_rng);
      Graph<double> g;
      typename Graph<double>::NoGrad off(g);
      Binder<double> bind;
      Td f = g.value(m.features(g, bind, batch));
      return std::pair{f, g.value(m.logits(g, bind, batch))};
    };
    StrategyConfig lin;
    lin.strategy = Strategy::linear;
    auto plain = run(lin, false);
    StrategyConfig vpt;
    vpt.strategy = Strategy::vpt;
    vpt.prompt_tokens = 0;
    StrategyConfig ad;
    ad.strategy = Strategy::adaptformer;
    ad.adapter_scale = 0.0;
    StrategyConfig none;
    none.strategy = Strategy::vqt;
    none.layers = "last:0";
    StrategyConfig t0;
    t0.strategy = Strategy::vqt;
    t0.tokens = 0;
    for (auto [sc, up] : {std::pair{vpt, false}, {ad, true}, {none, false}, {t0, false}}) {
      auto got = run(sc, up);
      if (!bitwise_equal(got.first, plain.first) || !bitwise_equal(got.second, plain.second))
        return {false, strategy_name(sc.strategy) + " differs from the plain backbone"};
      checked += 2;
    }
  }
  return {true, std::to_string(checked) + " feature/logit tensors bitwise equal (VPT T=0, AdaptFormer s=0, VQT "
                                          "last:0 and T=0)"};
}

Outcome feature_cache() {
  for (Mode mode : {Mode::paper, Mode::full}) {
    auto c = ViTConfig::tiny(mode);
    auto w = with_biases(c, 81);
    auto data = random_images(c, 40, 5, 82);
    StrategyConfig sc;
    sc.tokens = 4;
    ProbeModel<double> m(w, sc, 5, 83);
    auto cache = build_cache(w, data, m.queries().active, 16);
    auto idx = std::vector<std::size_t>{39, 0, 17, 5, 22};
    Graph<double> g;
    typename Graph<double>::NoGrad off(g);
    Binder<double> bind;
    Td direct = g.value(m.features(g, bind, make_batch(data, idx, c.patch_size)));
    Td cached = g.value(m.features(g, bind, make_batch(data, idx, c.patch_size, &cache)));
    if (!bitwise_equal(direct, cached)) return {false, "cached Z' differs from recomputed Z'"};
  }
  // Timing: one training epoch on n = 1000 with and without the cache.
  SyntheticTaskSpec spec;
  spec.train = 1000;
  spec.test = 10;
  spec.pretext = 10;
  auto task = gen_task<float>(spec);
  StrategyConfig sc;
  ProbeModel<float> m(task.teacher, sc, task.train.classes, 1);
  auto idx = iota(task.train.size());
  const auto t0 = std::chrono::steady_clock::now();
  auto cache = build_cache(task.teacher, task.train, m.queries().active);
  const double build_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  auto epoch_ms = [&](const FeatureCache<float>* cc) {
    double best = 1e300;
    for (int rep = 0; rep < 2; ++rep) {
      const auto s = std::chrono::steady_clock::now();
      train_probe(m, task.train, idx, {.lr = 0.1, .epochs = 1, .batch = 64, .seed = 1}, cc);
      best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - s).count());
    }
    return best;
  };
  const double with = epoch_ms(&cache), without = epoch_ms(nullptr);
  return {with < without, "Z' bitwise equal in both modes; epoch " + fmt(with, 4) + " ms cached vs " +
                              fmt(without, 4) + " ms recomputed (cache build " + fmt(build_ms, 4) + " ms)"};
}

Outcome aggregation_identities() {
  ViTConfig c = ViTConfig::tiny();
  Rng rng(91);
  for (std::size_t T : {1, 2, 4, 8}) {
    Td z = normal_tensor<double>({c.dim, T}, 1.0, rng);
    Td uniform({T}, 1.0 / double(T));
    if (!bitwise_equal(aggregate_within(z, {Within::weighted, Across::concat}, &uniform),
                       aggregate_within(z, {Within::mean, Across::concat})))
      return {false, "uniform weighted sum differs from mean pool at T=" + std::to_string(T)};
  }
  const std::size_t L = 4, T = 3;
  std::vector<Td> layers;
  for (std::size_t m = 0; m < L; ++m) layers.push_back(normal_tensor<double>({c.dim, T}, 1.0, rng));
  Td cls = normal_tensor<double>({c.dim}, 1.0, rng);
  AggregationPlan plan{Within::none, Across::weighted};
  for (std::size_t k = 0; k < L; ++k) {
    auto weights = AggregatorWeights<double>::init(plan, c, L, T, 0);
    weights.across.fill(0);
    weights.across[k] = 1;
    Td out = aggregate_across(layers, cls, plan, c, &weights);
    Td single = aggregate_across(std::vector<Td>{layers[k]}, cls, {Within::none, Across::concat}, c);
    if (!bitwise_equal(out, single)) return {false, "one-hot across weights differ at layer " + std::to_string(k)};
  }
  return {true, "uniform within-layer weights == mean pool (T in {1,2,4,8}); one-hot across-layer weights == "
                "single layer (4 layers)"};
}

// CSV rows with the trailing wall_ms column removed.
std::vector<std::string> csv_without_wall(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(line.substr(0, line.rfind(',')));
  return rows;
}

Outcome cli_reproducibility() {
  const fs::path root = fs::temp_directory_path() / ("vqtlab_accept_" + std::to_string(::getpid()));
  fs::create_directories(root);
  const fs::path cfg = root / "run.json";
  std::ofstream(cfg) << R"({
  "seed": 5,
  "task": {"train": 200, "test": 100, "pretext": 200},
  "pretrain": {"steps": 20},
  "train": {"lrs": [0.5, 0.1], "wds": [0, 0.001], "epochs": 3},
  "strategy": {"name": "vqt", "T": 2},
  "sweep": {"axis": "T", "values": [1, 2, 4]}
})";
  auto sh = [&](const std::string& args, const fs::path& out) {
    const std::string cmd = "VQTLAB_THREADS=2 " + std::string(VQTLAB_CLI) + " " + args + " --config " +
                            cfg.string() + " --out " + out.string() + " > " + (out.string() + ".log") + " 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  std::vector<std::vector<std::string>> probe, sweep;
  for (const char* name : {"a", "b"}) {
    const fs::path out = root / name;
    for (const char* sub : {"gen-task", "pretrain", "probe"})
      if (int rc = sh(sub, out); rc != 0) return {false, std::string(sub) + " exited " + std::to_string(rc)};
    probe.push_back(csv_without_wall(out / "results.csv"));
    if (int rc = sh("sweep", out); rc != 0) return {false, "sweep exited " + std::to_string(rc)};
    sweep.push_back(csv_without_wall(out / "results.csv"));
  }
  fs::remove_all(root);
  const bool ok = probe[0] == probe[1] && sweep[0] == sweep[1] && probe[0].size() == 2 && sweep[0].size() == 4;
  return {ok, "probe rows " + std::to_string(probe[0].size() - 1) + ", sweep rows " +
                  std::to_string(sweep[0].size() - 1) + (ok ? ", identical" : ", differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  int only = 0;
  app.add_option("--only", only, "run a single criterion")->check(CLI::Range(1, 13));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"intactness", intactness},
      {"pooling special case", pooling_special_case},
      {"gradient correctness", gradient_check},
      {"back-propagation bypass", backprop_bypass},
      {"parameter-cost table", parameter_table},
      {"feature dimension", feature_dimension},
      {"storage estimate", storage_estimate},
      {"group-lasso selection", group_lasso_selection},
      {"desk-scale transfer", transfer_property},
      {"identity lattice", identity_lattice},
      {"feature cache", feature_cache},
      {"aggregation identities", aggregation_identities},
      {"CLI reproducibility", cli_reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<std::size_t>(only) != i + 1) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << "  " << criteria[i].first << ": "
              << o.detail << "  [" << fmt(sec, 3) << " s]" << std::endl;
  }
  return failed;
}
