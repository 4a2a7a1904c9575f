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


// Gated refinement with adaptive early exit.
//
// Before every refinement step a small gate reads the latent and picks
// "skip" (class 0) or "process" (class 1). During training the choice is a
// Gumbel-argmax sample whose gradient flows through the softmax probability
// of class 1 (straight-through). At inference the gate is deterministic and
// the first skip ends the chain.

#ifndef LATREF_GATING_HPP_
#define LATREF_GATING_HPP_

#include <array>
#include <optional>
#include <vector>

#include "latref/model.hpp"

namespace latref {

struct GateParams {
  ParamPtr proj1_w, proj1_b;  // 2 x C x 1, 2
  ParamPtr slope;             // 2
  ParamPtr proj2_w, proj2_b;  // 2 x 2 x L, 2

  std::vector<ParamPtr> parameters() const;
  std::size_t latent_length() const { return proj2_w->value.dim(2); }
};

GateParams make_gate(std::size_t latent_channels, std::size_t latent_length, std::uint64_t seed);
std::size_t gate_param_count(std::size_t latent_channels, std::size_t latent_length);

enum class GateMode { kTrain, kInfer };

struct GateConfig {
  double temperature = 1.0;
  double penalty_weight = 0.75;
  double penalty_target = 3.0;

  bool operator==(const GateConfig&) const = default;
};

struct GateDecision {
  int hard = 0;
  double soft = 0.0;
  std::array<double, 2> logits{};
  bool gumbel_used = false;
  /// Scalar on the tape: forward value `hard`, gradient through `soft`.
  Var value;
};

/// Raw logits f(v) as a 2 x 1 tape value.
Var gate_logits(const GateParams& gate, Var v);

/// `force` overrides the hard decision (soft path unchanged); tests use it.
GateDecision gate_forward(Var v, const GateParams& gate, GateMode mode, Rng* rng,
                          const GateConfig& cfg = {}, std::optional<int> force = std::nullopt);

struct GatedStep {
  Var latent;
  GateDecision decision;
  bool block_evaluated = false;
};

GatedStep gated_step(Var v, const BlockParams& block, std::size_t latent_channels,
                     const GateParams& gate, GateMode mode, Rng* rng, const GateConfig& cfg = {},
                     std::optional<int> force = std::nullopt);

struct AdaptiveOptions {
  /// Inference only: stop at the first skip. When false, every step is
  /// gated and evaluated.
  bool early_exit = true;
  /// Per-step forced decisions (shorter vectors leave later steps free).
  std::vector<int> force;
};

struct AdaptiveResult {
  Var latent;
  /// Sum of the decision values; differentiable in train mode.
  Var g;
  std::size_t steps_processed = 0;
  std::size_t block_evaluations = 0;
  std::vector<GateDecision> decisions;
};

AdaptiveResult adaptive_separate(const ModelParams& model, Var v, const GateParams& gate,
                                 GateMode mode, Rng* rng, const GateConfig& cfg = {},
                                 const AdaptiveOptions& options = {});

/// weight * (g - target)^2.
Var gate_penalty(Var g, const GateConfig& cfg = {});
double gate_penalty(double g, const GateConfig& cfg = {});

}  // namespace latref

#endif  // LATREF_GATING_HPP_
