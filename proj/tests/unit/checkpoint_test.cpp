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

#include "latref/checkpoint.hpp"

#include <filesystem>

#include <gtest/gtest.h>

namespace latref {
namespace {

SeparationConfig config() {
  SeparationConfig c;
  c.enc_bases = 8;
  c.enc_kernel = 6;
  c.enc_stride = 3;
  c.latent_channels = 4;
  c.hidden_channels = 6;
  c.sub_block_kernel = 3;
  c.scales = 2;
  c.num_sources = 2;
  c.blocks = {BlockSpec{2, 2, std::nullopt}, BlockSpec{2, 1, 0}};
  return c;
}

void expect_same(const ModelParams& a, const ModelParams& b) {
  EXPECT_EQ(a.config, b.config);
  ASSERT_EQ(a.heads.size(), b.heads.size());
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
  }
}

TEST(Checkpoint, RoundTripIsBitExactAndKeepsAliasing) {
  ModelParams m = make_model(config(), 1, 2);
  Rng rng(2);
  randomize(m, rng);
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(m, nullptr));
  expect_same(m, back.model);
  EXPECT_FALSE(back.gate.has_value());
  EXPECT_EQ(back.model.blocks[0], back.model.blocks[1]);
}

TEST(Checkpoint, GateRoundTripThroughAFile) {
  ModelParams m = make_model(config(), 3);
  const GateParams g = make_gate(4, 11, 4);
  g.proj2_b->value[0] = 1.0 / 3.0;
  const auto path = std::filesystem::temp_directory_path() / "latref_ckpt_test.ckpt";
  save_checkpoint(path, m, &g);
  const Checkpoint back = load_checkpoint(path);
  expect_same(m, back.model);
  ASSERT_TRUE(back.gate.has_value());
  const auto ga = g.parameters(), gb = back.gate->parameters();
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_EQ(ga[i]->value, gb[i]->value);
  // Serialization is a pure function of the parameters.
  EXPECT_EQ(serialize_checkpoint(back.model, &*back.gate), serialize_checkpoint(m, &g));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  const ModelParams m = make_model(config(), 5);
  auto bytes = serialize_checkpoint(m, nullptr);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), Error);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_checkpoint(bytes), Error);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), Error);
}

}  // namespace
}  // namespace latref
