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


// Analytic training-memory model.
//
// Activation bytes count what a tape retains for one backward pass: every
// value that needs a gradient plus each constant consumed directly by such a
// value. The formula follows the exact node sequence of the forward pass
// (encoder, sub-blocks, heads, PIT loss), so it equals
// Tape::retained_activation_bytes() for a batch of one. A frozen prefix only
// contributes the tensors it hands to the trainable part.

#ifndef LATREF_MEMORY_HPP_
#define LATREF_MEMORY_HPP_

#include <optional>
#include <vector>

#include "latref/model.hpp"

namespace latref {

struct StageMemory {
  std::size_t stage = 0;
  std::size_t trainable_param_bytes = 0;
  std::size_t frozen_param_bytes = 0;
  std::size_t activation_bytes = 0;
};

struct MemoryReport {
  std::size_t trainable_param_bytes = 0;
  std::size_t frozen_param_bytes = 0;
  /// Adam first and second moments.
  std::size_t optimizer_state_bytes = 0;
  std::size_t gradient_bytes = 0;
  std::size_t activation_bytes_backward = 0;
  /// Progressive runs: one entry per stage. End-to-end: a single entry.
  std::vector<StageMemory> stages;

  std::size_t total_bytes() const;
  /// Largest per-stage activation footprint.
  std::size_t peak_activation_bytes() const;
};

/// Retained activation elements for one item of length `samples`.
/// `first_step`/`end_step` select the trainable refinement steps; steps
/// before `first_step` belong to a frozen prefix (together with the
/// encoder when first_step > 0).
std::size_t activation_elements(const SeparationConfig& config, std::size_t samples,
                                std::size_t first_step, std::size_t end_step);

/// Without `stage`: end-to-end training of the whole config. With `stage`:
/// progressive accounting where stage i trains block i and its head on top of
/// a frozen encoder and blocks 0..i-1; the top-level fields describe that
/// stage and `stages` lists every stage.
MemoryReport memory_account(const SeparationConfig& config, std::size_t batch_size,
                            std::size_t samples, std::optional<std::size_t> stage = std::nullopt);

}  // namespace latref

#endif  // LATREF_MEMORY_HPP_
