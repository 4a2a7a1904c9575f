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


#include "latref/gating.hpp"

#include <cmath>

namespace latref {

std::vector<ParamPtr> GateParams::parameters() const {
  return {proj1_w, proj1_b, slope, proj2_w, proj2_b};
}

GateParams make_gate(std::size_t latent_channels, std::size_t latent_length, std::uint64_t seed) {
  if (latent_channels == 0 || latent_length == 0) throw Error("make_gate: empty latent shape");
  Rng rng(seed);
  auto uniform = [&](std::string name, Shape shape, double bound) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return make_param(std::move(name), std::move(t));
  };
  const double b1 = 1.0 / std::sqrt(static_cast<double>(latent_channels));
  const double b2 = 1.0 / std::sqrt(2.0 * static_cast<double>(latent_length));
  GateParams g;
  g.proj1_w = uniform("gate.proj1.w", {2, latent_channels, 1}, b1);
  g.proj1_b = uniform("gate.proj1.b", {2}, b1);
  g.slope = make_param("gate.slope", Tensor({2}, 0.25));
  g.proj2_w = uniform("gate.proj2.w", {2, 2, latent_length}, b2);
  // Start biased towards "process" so early fine-tuning keeps full depth.
  g.proj2_b = make_param("gate.proj2.b", Tensor({2}, std::vector<double>{0.0, 1.0}));
  return g;
}

std::size_t gate_param_count(std::size_t latent_channels, std::size_t latent_length) {
  return 2 * latent_channels + 2 + 2 + 4 * latent_length + 2;
}

Var gate_logits(const GateParams& gate, Var v) {
  const Tensor& vv = v.value();
  if (vv.rank() != 2 || vv.dim(1) != gate.latent_length()) {
    throw Error("gate: latent " + shape_to_string(vv.shape()) + " does not match gate length " +
                std::to_string(gate.latent_length()));
  }
  Tape& t = v.tape();
  Var h = conv1d(v, t.param(gate.proj1_w), t.param(gate.proj1_b), ConvOptions{});
  h = prelu(h, t.param(gate.slope));
  return conv1d(h, t.param(gate.proj2_w), t.param(gate.proj2_b),
                ConvOptions{.stride = 1, .padding = Padding::kValid});
}

GateDecision gate_forward(Var v, const GateParams& gate, GateMode mode, Rng* rng,
                          const GateConfig& cfg, std::optional<int> force) {
  Var logits = gate_logits(gate, v);
  Tape& t = v.tape();
  GateDecision d;
  d.logits = {logits.value()[0], logits.value()[1]};
  if (mode == GateMode::kTrain) {
    if (rng == nullptr) throw Error("gate_forward: train mode needs a random generator");
    const double g0 = rng->gumbel();
    const double g1 = rng->gumbel();
    Var z = logits + t.constant(Tensor({2, 1}, std::vector<double>{g0, g1}));
    Var p = element(softmax(scale(z, 1.0 / cfg.temperature), 0), 1);
    d.gumbel_used = true;
    d.hard = z.value()[1] > z.value()[0] ? 1 : 0;
    d.soft = p.value()[0];
    if (force) d.hard = *force;
    d.value = straight_through(p, static_cast<double>(d.hard));
  } else {
    d.hard = d.logits[1] > d.logits[0] ? 1 : 0;
    if (force) d.hard = *force;
    d.soft = static_cast<double>(d.hard);
    d.value = t.constant(Tensor::scalar(d.soft));
  }
  return d;
}

GatedStep gated_step(Var v, const BlockParams& block, std::size_t latent_channels,
                     const GateParams& gate, GateMode mode, Rng* rng, const GateConfig& cfg,
                     std::optional<int> force) {
  GatedStep step;
  step.decision = gate_forward(v, gate, mode, rng, cfg, force);
  if (mode == GateMode::kTrain) {
    // The skip branch still needs B(v) for the soft gradient path.
    Var processed = apply_block(block, v, latent_channels);
    step.latent = gate_mix(processed, v, step.decision.value);
    step.block_evaluated = true;
  } else if (step.decision.hard == 1) {
    step.latent = apply_block(block, v, latent_channels);
    step.block_evaluated = true;
  } else {
    step.latent = v;
  }
  return step;
}

AdaptiveResult adaptive_separate(const ModelParams& model, Var v, const GateParams& gate,
                                 GateMode mode, Rng* rng, const GateConfig& cfg,
                                 const AdaptiveOptions& options) {
  const auto& config = model.config;
  const std::size_t n = config.total_steps();
  if (n == 0) throw Error("adaptive_separate: no refinement steps");
  AdaptiveResult r;
  r.latent = v;
  for (std::size_t step = 0; step < n; ++step) {
    std::optional<int> force;
    if (step < options.force.size()) force = options.force[step];
    const BlockParams& block = *model.blocks[config.block_for_step(step)];
    GatedStep s;
    if (mode == GateMode::kInfer && !options.early_exit) {
      // Full evaluation: every step computes B(v) and selects with the decision.
      s.decision = gate_forward(r.latent, gate, mode, rng, cfg, force);
      Var processed = apply_block(block, r.latent, config.latent_channels);
      s.latent = gate_mix(processed, r.latent, s.decision.value);
      s.block_evaluated = true;
    } else {
      s = gated_step(r.latent, block, config.latent_channels, gate, mode, rng, cfg, force);
    }
    r.latent = s.latent;
    r.g = r.g.valid() ? r.g + s.decision.value : s.decision.value;
    r.steps_processed += static_cast<std::size_t>(s.decision.hard);
    r.block_evaluations += s.block_evaluated ? 1 : 0;
    r.decisions.push_back(s.decision);
    if (mode == GateMode::kInfer && options.early_exit && s.decision.hard == 0) break;
  }
  return r;
}

Var gate_penalty(Var g, const GateConfig& cfg) {
  return scale(sum_squares(add_scalar(g, -cfg.penalty_target)), cfg.penalty_weight);
}

double gate_penalty(double g, const GateConfig& cfg) {
  const double d = g - cfg.penalty_target;
  return cfg.penalty_weight * d * d;
}

}  // namespace latref
