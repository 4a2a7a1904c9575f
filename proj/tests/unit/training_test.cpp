// Copyright 2026 The latref Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "latref/training.hpp"

#include <cmath>
#include <limits>
#include <set>

#include <gtest/gtest.h>

namespace latref {
namespace {

double norm_of(const Gradients& g) {
  double s = 0.0;
  for (const auto& [p, t] : g.entries()) {
    for (double v : t.data()) s += v * v;
  }
  return std::sqrt(s);
}

Gradients single(const ParamPtr& p, std::vector<double> values) {
  Gradients g;
  g.accumulate(p, Tensor::vector(std::move(values)));
  return g;
}

TEST(LrSchedule, StepDecay) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 0), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 39), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 40), 1e-3 / 3);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 120), 1e-3 / 27);
  for (std::size_t e = 1; e < 300; ++e) EXPECT_LE(lr_at_epoch(cfg, e), lr_at_epoch(cfg, e - 1));
}

TEST(TrainConfig, ValidationNamesTheField) {
  TrainConfig cfg;
  cfg.clip_norm = 0.0;
  try {
    cfg.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("clip_norm"), std::string::npos);
  }
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(ClipGlobalNorm, Examples) {
  auto p = make_param("p", Tensor::vector({0, 0}));
  Gradients below = single(p, {0, 3});
  EXPECT_DOUBLE_EQ(clip_global_norm(below, 5.0), 3.0);
  EXPECT_EQ(below.entries()[0].second.values(), (std::vector<double>{0, 3}));
  Gradients boundary = single(p, {3, 4});
  clip_global_norm(boundary, 5.0);
  EXPECT_EQ(boundary.entries()[0].second.values(), (std::vector<double>{3, 4}));
  Gradients above = single(p, {6, 8});
  EXPECT_DOUBLE_EQ(clip_global_norm(above, 5.0), 10.0);
  EXPECT_EQ(above.entries()[0].second.values(), (std::vector<double>{3, 4}));
}

TEST(ClipGlobalNorm, BoundedAndDirectionPreserved) {
  Rng rng(1);
  auto a = make_param("a", Tensor({5}));
  auto b = make_param("b", Tensor({3}));
  for (int i = 0; i < 100; ++i) {
    Gradients g;
    std::vector<double> va(5), vb(3);
    for (auto& v : va) v = rng.normal() * 4;
    for (auto& v : vb) v = rng.normal() * 4;
    g.accumulate(a, Tensor::vector(va));
    g.accumulate(b, Tensor::vector(vb));
    const double before = norm_of(g);
    clip_global_norm(g, 2.0);
    EXPECT_LE(norm_of(g), 2.0 * (1 + 1e-12));
    const double s = g.entries()[0].second[0] / va[0];
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(g.entries()[0].second[k], s * va[k], 1e-12);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(g.entries()[1].second[k], s * vb[k], 1e-12);
    EXPECT_NEAR(s, std::min(1.0, 2.0 / before), 1e-12);
  }
}

TEST(ClipGlobalNorm, NonFiniteNamesTheParameter) {
  auto p = make_param("block0.sub0.in.w", Tensor({2}));
  Gradients g = single(p, {1.0, std::numeric_limits<double>::infinity()});
  try {
    clip_global_norm(g, 5.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("block0.sub0.in.w"), std::string::npos) << e.what();
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto p = make_param("p", Tensor::vector({1.5, -2.0}));
  OptimizerState state;
  adam_step(single(p, {0, 0}), state, 1e-2);
  EXPECT_EQ(p->value.values(), (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(state.step, 1u);
  EXPECT_EQ(state.moments.at(p.get()).m.shape(), p->value.shape());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = make_param("p", Tensor::vector({1.0, 1.0, 1.0}));
  OptimizerState state;
  const std::vector<double> g{0.3, -2.0, 1e-3};
  const double lr = 0.01;
  adam_step(single(p, g), state, lr);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = 1.0 - lr * g[i] / (std::abs(g[i]) + state.eps);
    EXPECT_NEAR(p->value[i], expected, 1e-15);
    EXPECT_NEAR(std::abs(p->value[i] - 1.0), lr, 1e-7);
  }
}

TEST(Adam, DescendsAConvexQuadratic) {
  auto p = make_param("x", Tensor::scalar(3.0));
  OptimizerState state;
  auto loss = [&] { return (p->value[0] - 1.0) * (p->value[0] - 1.0); };
  double prev = loss();
  for (int i = 0; i < 2; ++i) {
    Gradients g;
    g.accumulate(p, Tensor::scalar(2.0 * (p->value[0] - 1.0)));
    adam_step(g, state, 0.1);
    EXPECT_LT(loss(), prev);
    prev = loss();
  }
  EXPECT_EQ(state.step, 2u);
}

std::vector<TrainItem> toy_batch(std::size_t n, Rng& rng) {
  std::vector<TrainItem> batch;
  for (std::size_t b = 0; b < n; ++b) {
    TrainItem item;
    item.sources = Tensor({3, 16});
    for (auto& v : item.sources.data()) v = rng.normal();
    item.mixture = Tensor({16});
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t i = 0; i < 16; ++i) item.mixture[i] += item.sources.at(r, i);
    }
    item.speech_count = 2;
    batch.push_back(item);
  }
  return batch;
}

TEST(AugmentBatch, SingleItemKeepsItsSum) {
  Rng rng(2);
  const auto batch = toy_batch(1, rng);
  const auto out = augment_batch(batch, rng);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].sources, batch[0].sources);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(out[0].mixture[i],
              ((0.0 + batch[0].sources.at(0, i)) + batch[0].sources.at(1, i)) +
                  batch[0].sources.at(2, i));
  }
}

TEST(AugmentBatch, RemixesRowsAcrossItemsAndResums) {
  Rng rng(3);
  const auto batch = toy_batch(4, rng);
  Rng a(9), b(9);
  const auto out = augment_batch(batch, a);
  const auto again = augment_batch(batch, b);
  for (std::size_t k = 0; k < out.size(); ++k) {
    EXPECT_EQ(out[k].mixture, again[k].mixture);
    for (std::size_t i = 0; i < 16; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < 3; ++r) s += out[k].sources.at(r, i);
      EXPECT_EQ(out[k].mixture[i], s);
    }
  }
  // Each source row r of the output is row r of some input item, and every
  // input row is used exactly once.
  for (std::size_t r = 0; r < 3; ++r) {
    std::multiset<std::size_t> used;
    for (const auto& item : out) {
      for (std::size_t src = 0; src < batch.size(); ++src) {
        if (item.sources.at(r, 0) == batch[src].sources.at(r, 0)) used.insert(src);
      }
    }
    EXPECT_EQ(used, (std::multiset<std::size_t>{0, 1, 2, 3}));
  }
}

SeparationConfig tiny(std::size_t n = 2) {
  SeparationConfig c;
  c.enc_bases = 16;
  c.enc_kernel = 16;
  c.enc_stride = 8;
  c.latent_channels = 8;
  c.hidden_channels = 16;
  c.sub_block_kernel = 5;
  c.scales = 2;
  c.num_sources = 3;
  c.blocks = {BlockSpec{1, n, std::nullopt}};
  return c;
}

MixtureSpec tiny_spec() {
  MixtureSpec s;
  s.duration = 0.125;
  s.seed = 11;
  return s;
}

TEST(TrainEndToEnd, OneEpochSmoke) {
  const Dataset train = make_dataset(tiny_spec(), 4, 0), val = make_dataset(tiny_spec(), 2, 1);
  ModelParams m = make_model(tiny(), 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  const History h = train_end_to_end(m, train, val, cfg);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_TRUE(std::isfinite(h[0].train_loss));
  EXPECT_TRUE(std::isfinite(h[0].val_sisdri));
  EXPECT_EQ(h[0].lr, 1e-3);
}

TEST(TrainEndToEnd, SameSeedSameParameters) {
  const Dataset train = make_dataset(tiny_spec(), 8, 0), val = make_dataset(tiny_spec(), 2, 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 5;
  ModelParams a = make_model(tiny(), 1), b = make_model(tiny(), 1);
  const History ha = train_end_to_end(a, train, val, cfg);
  const History hb = train_end_to_end(b, train, val, cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
  for (std::size_t e = 0; e < ha.size(); ++e) EXPECT_EQ(ha[e].train_loss, hb[e].train_loss);
}

TEST(TrainEndToEnd, FrozenGroupsStayBitIdentical) {
  const Dataset train = make_dataset(tiny_spec(), 4, 0), val = make_dataset(tiny_spec(), 2, 1);
  ModelParams m = make_model(tiny(), 2, 2);
  FreezeMask freeze;
  freeze.add(m.group("encoder"));
  const auto before = m.clone();
  TrainConfig cfg;
  cfg.epochs = 2;
  train_end_to_end(m, train, val, cfg, 0, freeze);
  const auto enc = m.group("encoder"), enc0 = before.group("encoder");
  for (std::size_t i = 0; i < enc.size(); ++i) EXPECT_EQ(enc[i]->value, enc0[i]->value);
  // The unused second head is not touched either; the trained block is.
  EXPECT_EQ(m.heads[1].mask_w->value, before.heads[1].mask_w->value);
  EXPECT_NE(m.group("block0")[0]->value, before.group("block0")[0]->value);
}

TEST(TrainEndToEnd, DeskRunBeatsTheMixture) {
  MixtureSpec spec = tiny_spec();
  spec.duration = 0.25;
  const Dataset train = make_dataset(spec, 32, 0), val = make_dataset(spec, 16, 1);
  ModelParams m = make_model(tiny(2), 3);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr0 = 2e-3;
  cfg.seed = 3;
  const History h = train_end_to_end(m, train, val, cfg);
  EXPECT_GT(h.back().val_sisdri, 0.0);
}

TEST(SplitEpochs, RemainderGoesToEarlyStages) {
  EXPECT_EQ(split_epochs(200, 2), (std::vector<std::size_t>{100, 100}));
  EXPECT_EQ(split_epochs(10, 3), (std::vector<std::size_t>{4, 3, 3}));
  EXPECT_EQ(split_epochs(11, 3), (std::vector<std::size_t>{4, 4, 3}));
  EXPECT_THROW(split_epochs(10, 0), Error);
}

TEST(TrainProgressive, FreezesPrefixAndKeepsEarlierStagesReproducible) {
  SeparationConfig c = tiny(1);
  c.blocks = {BlockSpec{1, 1, std::nullopt}, BlockSpec{1, 2, std::nullopt}};
  const Dataset train = make_dataset(tiny_spec(), 6, 0), val = make_dataset(tiny_spec(), 3, 1);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 2;
  const ProgressiveResult r = train_progressive(c, train, val, cfg);
  ASSERT_EQ(r.stages.size(), 2u);
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_EQ(r.history[1].lr, r.history[2].lr);  // schedule resets per stage
  const ModelParams& s1 = r.stages[0];
  const ModelParams& s2 = r.stages[1];
  EXPECT_EQ(s1.heads.size(), 1u);
  EXPECT_EQ(s2.heads.size(), 2u);
  for (const char* group : {"encoder", "block0", "head0"}) {
    const auto a = s1.group(group), b = s2.group(group);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  }
  const Tensor& mixture = val.samples[0].mixture;
  EXPECT_EQ(separate_sources(s2, mixture, 0, c.steps_through_block(1)),
            separate_sources(s1, mixture, 0));
}

TEST(TrainProgressive, RejectsSharedBlocks) {
  SeparationConfig c = tiny(1);
  c.blocks = {BlockSpec{1, 1, std::nullopt}, BlockSpec{1, 1, 0}};
  const Dataset d = make_dataset(tiny_spec(), 2, 0);
  EXPECT_THROW(train_progressive(c, d, d, TrainConfig{}), Error);
}

TEST(TrainAdaptive, SplitsPretrainingAndGateEpochs) {
  MixtureSpec spec = tiny_spec();
  spec.task = Task::kEnhancement;
  SeparationConfig c = tiny(4);
  c.num_sources = 2;
  const Dataset train = make_dataset(spec, 4, 0), val = make_dataset(spec, 4, 1);
  TrainConfig cfg;
  cfg.epochs = 10;
  GateTrainConfig g;
  const AdaptiveTrainResult r = train_adaptive(c, train, val, cfg, g);
  ASSERT_EQ(r.history.size(), 10u);
  for (std::size_t e = 0; e < 9; ++e) EXPECT_FALSE(r.history[e].mean_g.has_value());
  ASSERT_TRUE(r.history[9].mean_g.has_value());
  EXPECT_GE(*r.history[9].mean_g, 0.0);
  EXPECT_LE(*r.history[9].mean_g, 4.0);
  EXPECT_EQ(r.history[9].epoch, 9u);
  EXPECT_DOUBLE_EQ(r.history[9].lr, 1e-4);
}

}  // namespace
}  // namespace latref
