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


#include "latref/memory.hpp"

#include <algorithm>

namespace latref {

namespace {

constexpr std::size_t kBytes = sizeof(double);

std::size_t sub_block_elements(const SeparationConfig& c, std::size_t length) {
  const std::size_t h = c.hidden_channels, ch = c.latent_channels;
  std::size_t levels = 0, upper_levels = 0;
  std::size_t l = length;
  for (std::size_t i = 0; i < c.scales; ++i) {
    if (i > 0) l = (l + 1) / 2;
    levels += l;
    if (i + 1 < c.scales) upper_levels += l;
  }
  // in conv, norm, prelu | per level conv, norm | per upper level upsample,
  // conv, add | out norm, prelu | residual conv, add
  return 3 * h * length + 2 * h * levels + 3 * h * upper_levels + 2 * h * length +
         2 * ch * length;
}

std::size_t head_elements(const SeparationConfig& c, std::size_t length, std::size_t samples) {
  const std::size_t s = c.num_sources, bases = c.enc_bases;
  const std::size_t decoded = length * c.enc_stride;
  std::size_t per_source = bases * length + decoded;  // masked product, decoder output
  if (s > 1) per_source += bases * length;            // mask rows
  if (decoded != samples) per_source += samples;      // crop
  std::size_t n = 2 * s * bases * length + s * per_source;  // mask conv, relu
  if (s > 1) n += s * samples;                              // stacked estimates
  return n;
}

std::size_t loss_elements(const SeparationConfig& c, std::size_t samples) {
  // Per source: estimate row, reference, scaled reference, error (length T)
  // and twelve scalars; then the running sum and the final scale.
  const std::size_t s = c.num_sources;
  return s * (4 * samples + 12) + (s - 1) + 1;
}

std::size_t param_count_of_steps(const SeparationConfig& c, std::size_t first_block,
                                 std::size_t end_block) {
  std::size_t n = 0;
  const std::size_t per_sub = sub_block_param_count(c);
  for (std::size_t b = first_block; b < end_block; ++b) {
    const auto& spec = c.blocks[b];
    if (spec.shares_params_with && *spec.shares_params_with >= first_block) continue;
    n += spec.sub_blocks * per_sub;
  }
  return n;
}

}  // namespace

std::size_t MemoryReport::total_bytes() const {
  return trainable_param_bytes + frozen_param_bytes + optimizer_state_bytes + gradient_bytes +
         activation_bytes_backward;
}

std::size_t MemoryReport::peak_activation_bytes() const {
  std::size_t peak = 0;
  for (const auto& s : stages) peak = std::max(peak, s.activation_bytes);
  return peak;
}

std::size_t activation_elements(const SeparationConfig& c, std::size_t samples,
                                std::size_t first_step, std::size_t end_step) {
  c.validate();
  if (samples == 0) throw Error("memory_account: zero-length input");
  if (end_step > c.total_steps() || first_step > end_step) {
    throw Error("memory_account: invalid step range");
  }
  const std::size_t length = c.latent_length(samples);
  std::size_t n = 0;
  if (first_step == 0) {
    // mixture, encoder conv, relu, norm, bottleneck
    n += samples + 3 * c.enc_bases * length + c.latent_channels * length;
  } else {
    // frozen prefix outputs: encoder representation and latent
    n += c.enc_bases * length + c.latent_channels * length;
  }
  for (std::size_t step = first_step; step < end_step; ++step) {
    n += c.blocks[c.block_for_step(step)].sub_blocks * sub_block_elements(c, length);
  }
  n += head_elements(c, length, samples);
  n += loss_elements(c, samples);
  return n;
}

MemoryReport memory_account(const SeparationConfig& config, std::size_t batch_size,
                            std::size_t samples, std::optional<std::size_t> stage) {
  config.validate();
  if (batch_size == 0) throw Error("memory_account: batch_size must be >= 1");
  const ParamCounts counts = count_params(config, 1);
  const std::size_t head = counts.mask_nets[0] + counts.decoders[0];
  const std::size_t m = config.blocks.size();

  std::vector<StageMemory> stages;
  if (!stage) {
    StageMemory s;
    s.trainable_param_bytes = counts.total() * kBytes;
    s.activation_bytes =
        batch_size * activation_elements(config, samples, 0, config.total_steps()) * kBytes;
    stages.push_back(s);
  } else {
    if (*stage >= m) {
      throw Error("memory_account: stage " + std::to_string(*stage) + " out of range");
    }
    for (std::size_t i = 0; i < m; ++i) {
      StageMemory s;
      s.stage = i;
      const std::size_t trainable =
          param_count_of_steps(config, i, i + 1) + head + (i == 0 ? counts.encoder : 0);
      const std::size_t frozen = i == 0 ? 0 : counts.encoder + param_count_of_steps(config, 0, i);
      s.trainable_param_bytes = trainable * kBytes;
      s.frozen_param_bytes = frozen * kBytes;
      s.activation_bytes = batch_size *
                           activation_elements(config, samples, config.steps_through_block(i),
                                               config.steps_through_block(i + 1)) *
                           kBytes;
      stages.push_back(s);
    }
  }
  const StageMemory& top = stages[stage.value_or(0)];
  MemoryReport r;
  r.trainable_param_bytes = top.trainable_param_bytes;
  r.frozen_param_bytes = top.frozen_param_bytes;
  r.optimizer_state_bytes = 2 * top.trainable_param_bytes;
  r.gradient_bytes = top.trainable_param_bytes;
  r.activation_bytes_backward = top.activation_bytes;
  r.stages = std::move(stages);
  return r;
}

}  // namespace latref
