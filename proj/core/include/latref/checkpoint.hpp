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


// Binary checkpoints.
//
//   "LATREFCK"  u32 version
//   u64 n, n bytes of JSON header {config, num_heads, has_gate, gate_length}
//   u64 tensor count, then per tensor:
//     u32 name length, name, u32 rank, rank x u64 dims, float64 data
//
// All integers and doubles are little-endian; values round-trip exactly.

#ifndef LATREF_CHECKPOINT_HPP_
#define LATREF_CHECKPOINT_HPP_

#include <filesystem>
#include <optional>

#include "latref/gating.hpp"
#include "latref/model.hpp"

namespace latref {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams model;
  std::optional<GateParams> gate;
};

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& model, const GateParams* gate);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& model,
                     const GateParams* gate = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace latref

#endif  // LATREF_CHECKPOINT_HPP_
