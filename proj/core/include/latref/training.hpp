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


// Optimization drivers: end-to-end, progressive (stage-wise with frozen
// prefix), and joint fine-tuning of a gated model.
//
// Batches are processed one item per tape; per-item gradients are summed in
// item order and averaged, so results do not depend on anything but the
// seeds and the data.

#ifndef LATREF_TRAINING_HPP_
#define LATREF_TRAINING_HPP_

#include <functional>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "latref/data.hpp"
#include "latref/gating.hpp"
#include "latref/losses.hpp"
#include "latref/model.hpp"

namespace latref {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 4;
  double lr0 = 1e-3;
  std::size_t lr_decay_every = 40;
  double lr_decay_factor = 1.0 / 3.0;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  bool augment = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

/// Scales every gradient by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;

  struct Moments {
    Tensor m, v;
  };
  std::unordered_map<const Parameter*, Moments> moments;
};

/// Bias-corrected Adam update of every parameter present in `grads`.
void adam_step(const Gradients& grads, OptimizerState& state, double lr);

/// Parameters excluded from updates; they enter tapes as constants.
struct FreezeMask {
  std::unordered_set<const Parameter*> frozen;

  void add(const std::vector<ParamPtr>& params);
  bool contains(const Parameter* p) const { return frozen.contains(p); }
  void apply(Tape& tape) const;
};

struct TrainItem {
  Tensor mixture;  // T
  Tensor sources;  // S x T
  std::size_t speech_count = 0;
};

/// Online re-mixing: source row r of output item b comes from item
/// perm_r(b) of the batch; mixtures are re-summed from the listed rows.
std::vector<TrainItem> augment_batch(const std::vector<TrainItem>& batch, Rng& rng);

struct EpochRecord {
  std::size_t stage = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_sisdri = 0.0;
  std::optional<double> mean_g;
};

using History = std::vector<EpochRecord>;
using EpochCallback = std::function<void(const EpochRecord&)>;

struct EvalRecord {
  std::size_t index = 0;
  double sisdri = 0.0;
  double noise_snr_db = 0.0;
  double speaker_snr_db = 0.0;
  std::size_t g = 0;
};

/// Per-sample SI-SDRi (speech rows, PIT-assigned) of head `stage` at full
/// depth, or of the gated model in inference mode when `gate` is given.
std::vector<EvalRecord> evaluate(const ModelParams& model, std::size_t stage,
                                 const GateParams* gate, const Dataset& data,
                                 const GateConfig& gate_cfg = {});
double mean_sisdri(const std::vector<EvalRecord>& records);

/// Trains every non-frozen parameter of `model` through head `stage` at full
/// depth.
History train_end_to_end(ModelParams& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg, std::size_t stage = 0,
                         const FreezeMask& freeze = {}, const EpochCallback& on_epoch = {});

struct ProgressiveResult {
  /// Deployable model after each stage, with config truncated to its depth
  /// and heads 0..stage.
  std::vector<ModelParams> stages;
  History history;
};

std::vector<std::size_t> split_epochs(std::size_t total, std::size_t stages);

ProgressiveResult train_progressive(const SeparationConfig& config, const Dataset& train,
                                    const Dataset& val, const TrainConfig& cfg,
                                    const EpochCallback& on_epoch = {});

struct GateTrainConfig {
  /// Fraction of the epochs spent pretraining without the gate.
  double pretrain_fraction = 0.9;
  double lr0 = 1e-4;
  std::size_t lr_decay_every = 5;
  double lr_decay_factor = 1.0 / 3.0;
  GateConfig gate;

  bool operator==(const GateTrainConfig&) const = default;
};

/// Joint fine-tuning of model and gate with loss PIT + gate_penalty(g).
/// Uses cfg for everything but the learning-rate schedule.
History finetune_gate(ModelParams& model, GateParams& gate, const Dataset& train,
                      const Dataset& val, const TrainConfig& cfg, const GateTrainConfig& gcfg,
                      std::size_t epochs, const EpochCallback& on_epoch = {});

struct AdaptiveTrainResult {
  ModelParams model;
  GateParams gate;
  History history;
};

/// Pretrains end-to-end then fine-tunes with the gate, splitting cfg.epochs
/// by gcfg.pretrain_fraction.
AdaptiveTrainResult train_adaptive(const SeparationConfig& config, const Dataset& train,
                                   const Dataset& val, const TrainConfig& cfg,
                                   const GateTrainConfig& gcfg, const EpochCallback& on_epoch = {});

}  // namespace latref

#endif  // LATREF_TRAINING_HPP_
