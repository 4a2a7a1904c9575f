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
#include <numeric>

namespace latref {

namespace {

struct ItemOutcome {
  Var loss;
  std::optional<double> g;
};

using ItemLoss = std::function<ItemOutcome(Tape&, const TrainItem&, Rng&)>;
using LrSchedule = std::function<double(std::size_t)>;

struct ValResult {
  double sisdri = 0.0;
  std::optional<double> mean_g;
};

struct FitSpec {
  std::size_t stage = 0;
  std::size_t epochs = 0;
  std::uint64_t stream = 0;  // decorrelates shuffles between phases
  LrSchedule lr;
  ItemLoss loss;
  std::function<ValResult()> validate;
};

TrainItem to_item(const Sample& s) { return {s.mixture, s.sources, s.speech_count}; }

Tensor as_row(const Tensor& x) { return x.reshaped(Shape{1, x.size()}); }

History fit(const Dataset& train, const TrainConfig& cfg, const FitSpec& spec,
            const FreezeMask& freeze, const EpochCallback& on_epoch) {
  if (train.samples.empty()) throw Error("training set is empty");
  History history;
  OptimizerState opt;
  const std::size_t n = train.samples.size();
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    Rng rng(mix_seed(mix_seed(cfg.seed, spec.stream), epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

    const double lr = spec.lr(epoch);
    double loss_sum = 0.0;
    double g_sum = 0.0;
    std::size_t g_count = 0;
    for (std::size_t start = 0, step = 0; start < n; start += cfg.batch_size, ++step) {
      std::vector<TrainItem> batch;
      for (std::size_t i = start; i < std::min(n, start + cfg.batch_size); ++i) {
        batch.push_back(to_item(train.samples[order[i]]));
      }
      if (cfg.augment) batch = augment_batch(batch, rng);
      Gradients total;
      for (const auto& item : batch) {
        Tape tape;
        freeze.apply(tape);
        ItemOutcome out = spec.loss(tape, item, rng);
        const double value = out.loss.value()[0];
        if (!std::isfinite(value)) {
          throw Error("non-finite training loss at stage " + std::to_string(spec.stage) +
                      ", epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
        }
        loss_sum += value;
        if (out.g) {
          g_sum += *out.g;
          ++g_count;
        }
        total.add(tape.backward(out.loss));
      }
      total.scale(1.0 / static_cast<double>(batch.size()));
      clip_global_norm(total, cfg.clip_norm);
      adam_step(total, opt, lr);
    }
    EpochRecord rec;
    rec.stage = spec.stage;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(n);
    const ValResult val = spec.validate();
    rec.val_sisdri = val.sisdri;
    rec.mean_g = val.mean_g;
    if (g_count > 0 && !rec.mean_g) rec.mean_g = g_sum / static_cast<double>(g_count);
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

ValResult validate_plain(const ModelParams& model, std::size_t stage, const Dataset& val) {
  if (val.samples.empty()) return {};
  return {mean_sisdri(evaluate(model, stage, nullptr, val)), std::nullopt};
}

ModelParams truncated(const ModelParams& model, std::size_t blocks, std::size_t heads) {
  ModelParams out = model.clone();
  out.config.blocks.resize(blocks);
  out.blocks.resize(blocks);
  out.heads.resize(heads);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error("train.batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw Error("train.lr0 must be positive");
  if (lr_decay_every == 0) throw Error("train.lr_decay_every must be >= 1");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw Error("train.lr_decay_factor must lie in (0, 1]");
  }
  if (!(clip_norm > 0.0)) throw Error("train.clip_norm must be positive");
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr0 * std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_every));
}

double clip_global_norm(Gradients& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw Error("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& [p, g] : grads.entries()) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw Error("non-finite gradient in parameter '" + p->name + "' at index " +
                    std::to_string(i));
      }
      sq += g[i] * g[i];
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

void adam_step(const Gradients& grads, OptimizerState& state, double lr) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [p, g] : grads.entries()) {
    if (g.shape() != p->value.shape()) {
      throw Error("adam_step: gradient shape " + shape_to_string(g.shape()) +
                  " does not match parameter '" + p->name + "'");
    }
    auto it = state.moments.find(p.get());
    if (it == state.moments.end()) {
      it = state.moments
               .emplace(p.get(), OptimizerState::Moments{Tensor(g.shape()), Tensor(g.shape())})
               .first;
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    auto w = p->value.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw Error("non-finite gradient in parameter '" + p->name + "' at index " +
                    std::to_string(i));
      }
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

void FreezeMask::add(const std::vector<ParamPtr>& params) {
  for (const auto& p : params) frozen.insert(p.get());
}

void FreezeMask::apply(Tape& tape) const {
  for (const Parameter* p : frozen) tape.freeze(p);
}

std::vector<TrainItem> augment_batch(const std::vector<TrainItem>& batch, Rng& rng) {
  if (batch.empty()) return {};
  const std::size_t b = batch.size();
  const std::size_t s = batch[0].sources.dim(0);
  const std::size_t t = batch[0].sources.dim(1);
  for (const auto& item : batch) {
    if (item.sources.shape() != batch[0].sources.shape()) {
      throw Error("augment_batch: items have different source shapes");
    }
  }
  std::vector<TrainItem> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i].sources = Tensor({s, t});
    out[i].mixture = Tensor({t}, 0.0);
    out[i].speech_count = batch[i].speech_count;
  }
  for (std::size_t r = 0; r < s; ++r) {
    std::vector<std::size_t> perm(b);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = b - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    for (std::size_t i = 0; i < b; ++i) {
      const auto src = batch[perm[i]].sources.data().subspan(r * t, t);
      std::copy(src.begin(), src.end(), out[i].sources.data().begin() + static_cast<std::ptrdiff_t>(r * t));
    }
  }
  for (auto& item : out) {
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t k = 0; k < t; ++k) item.mixture[k] += item.sources[r * t + k];
    }
  }
  return out;
}

std::vector<EvalRecord> evaluate(const ModelParams& model, std::size_t stage,
                                 const GateParams* gate, const Dataset& data,
                                 const GateConfig& gate_cfg) {
  std::vector<EvalRecord> records;
  records.reserve(data.samples.size());
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    Tape tape;
    Var x = tape.constant(as_row(s.mixture));
    EvalRecord rec;
    rec.index = i;
    rec.noise_snr_db = s.meta.noise_snr_db;
    rec.speaker_snr_db = s.meta.speaker_snr_db;
    Tensor est;
    if (gate != nullptr) {
      Encoded enc = encode(model, x);
      AdaptiveResult r = adaptive_separate(model, enc.latent, *gate, GateMode::kInfer, nullptr,
                                           gate_cfg);
      est = mask_and_decode(model, enc.v_enc, r.latent, stage, s.mixture.size()).value();
      rec.g = r.steps_processed;
    } else {
      est = forward(model, x, stage).value();
      rec.g = model.config.total_steps();
    }
    rec.sisdri = mean_speech_sisdri(est, s.sources, s.mixture.data(), s.speech_count);
    records.push_back(rec);
  }
  return records;
}

double mean_sisdri(const std::vector<EvalRecord>& records) {
  if (records.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : records) total += r.sisdri;
  return total / static_cast<double>(records.size());
}

History train_end_to_end(ModelParams& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg, std::size_t stage, const FreezeMask& freeze,
                         const EpochCallback& on_epoch) {
  cfg.validate();
  if (stage >= model.heads.size()) throw Error("train: head " + std::to_string(stage) + " missing");
  FitSpec spec;
  spec.stage = stage;
  spec.epochs = cfg.epochs;
  spec.stream = stage;
  spec.lr = [&](std::size_t e) { return lr_at_epoch(cfg, e); };
  spec.loss = [&](Tape& tape, const TrainItem& item, Rng&) {
    Var est = forward(model, tape.constant(as_row(item.mixture)), stage);
    return ItemOutcome{pit_loss(est, item.sources, item.speech_count).loss, std::nullopt};
  };
  spec.validate = [&] { return validate_plain(model, stage, val); };
  return fit(train, cfg, spec, freeze, on_epoch);
}

std::vector<std::size_t> split_epochs(std::size_t total, std::size_t stages) {
  if (stages == 0) throw Error("split_epochs: no stages");
  std::vector<std::size_t> out(stages, total / stages);
  for (std::size_t i = 0; i < total % stages; ++i) ++out[i];
  return out;
}

ProgressiveResult train_progressive(const SeparationConfig& config, const Dataset& train,
                                    const Dataset& val, const TrainConfig& cfg,
                                    const EpochCallback& on_epoch) {
  config.validate();
  cfg.validate();
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    if (config.blocks[i].shares_params_with) {
      throw Error("progressive training needs independent blocks; blocks[" + std::to_string(i) +
                  "].shares_params_with is set");
    }
  }
  const std::size_t m = config.blocks.size();
  ModelParams model = make_model(config, cfg.seed, 1);
  Rng head_rng(mix_seed(cfg.seed, 0x4845414400ull));
  const auto epochs = split_epochs(cfg.epochs, m);
  ProgressiveResult result;
  for (std::size_t stage = 0; stage < m; ++stage) {
    if (stage > 0) add_head(model, head_rng);
    // The stage view sees blocks 0..stage only, so full depth is the prefix.
    ModelParams view;
    view.config = model.config;
    view.config.blocks.resize(stage + 1);
    view.encoder = model.encoder;
    view.blocks.assign(model.blocks.begin(),
                       model.blocks.begin() + static_cast<std::ptrdiff_t>(stage + 1));
    view.heads = model.heads;
    FreezeMask freeze;
    if (stage > 0) {
      freeze.add(model.encoder.parameters());
      for (std::size_t i = 0; i < stage; ++i) freeze.add(model.blocks[i]->parameters());
    }
    TrainConfig stage_cfg = cfg;
    stage_cfg.epochs = epochs[stage];
    History h = train_end_to_end(view, train, val, stage_cfg, stage, freeze, on_epoch);
    result.history.insert(result.history.end(), h.begin(), h.end());
    result.stages.push_back(truncated(model, stage + 1, stage + 1));
  }
  return result;
}

History finetune_gate(ModelParams& model, GateParams& gate, const Dataset& train,
                      const Dataset& val, const TrainConfig& cfg, const GateTrainConfig& gcfg,
                      std::size_t epochs, const EpochCallback& on_epoch) {
  cfg.validate();
  TrainConfig sched = cfg;
  sched.lr0 = gcfg.lr0;
  sched.lr_decay_every = gcfg.lr_decay_every;
  sched.lr_decay_factor = gcfg.lr_decay_factor;
  sched.validate();
  FitSpec spec;
  spec.stage = 0;
  spec.epochs = epochs;
  spec.stream = 0x47415445ull;
  spec.lr = [sched](std::size_t e) { return lr_at_epoch(sched, e); };
  spec.loss = [&](Tape& tape, const TrainItem& item, Rng& rng) {
    Encoded enc = encode(model, tape.constant(as_row(item.mixture)));
    AdaptiveResult r =
        adaptive_separate(model, enc.latent, gate, GateMode::kTrain, &rng, gcfg.gate);
    Var est = mask_and_decode(model, enc.v_enc, r.latent, 0, item.mixture.size());
    Var loss = pit_loss(est, item.sources, item.speech_count).loss + gate_penalty(r.g, gcfg.gate);
    return ItemOutcome{loss, r.g.value()[0]};
  };
  spec.validate = [&] {
    if (val.samples.empty()) return ValResult{};
    const auto records = evaluate(model, 0, &gate, val, gcfg.gate);
    double g = 0.0;
    for (const auto& r : records) g += static_cast<double>(r.g);
    return ValResult{mean_sisdri(records), g / static_cast<double>(records.size())};
  };
  return fit(train, cfg, spec, FreezeMask{}, on_epoch);
}

AdaptiveTrainResult train_adaptive(const SeparationConfig& config, const Dataset& train,
                                   const Dataset& val, const TrainConfig& cfg,
                                   const GateTrainConfig& gcfg, const EpochCallback& on_epoch) {
  config.validate();
  if (!(gcfg.pretrain_fraction >= 0.0 && gcfg.pretrain_fraction <= 1.0)) {
    throw Error("gate.pretrain_fraction must lie in [0, 1]");
  }
  const auto pre = static_cast<std::size_t>(
      std::llround(static_cast<double>(cfg.epochs) * gcfg.pretrain_fraction));
  AdaptiveTrainResult out{make_model(config, cfg.seed, 1), {}, {}};
  const std::size_t length = config.latent_length(train.spec.samples());
  out.gate = make_gate(config.latent_channels, length, mix_seed(cfg.seed, 0x47415445ull));
  TrainConfig pre_cfg = cfg;
  pre_cfg.epochs = pre;
  out.history = train_end_to_end(out.model, train, val, pre_cfg, 0, {}, on_epoch);
  History ft = finetune_gate(out.model, out.gate, train, val, cfg, gcfg, cfg.epochs - pre,
                             [&](const EpochRecord& r) {
                               if (on_epoch) {
                                 EpochRecord shifted = r;
                                 shifted.epoch += pre;
                                 on_epoch(shifted);
                               }
                             });
  for (auto& r : ft) r.epoch += pre;
  out.history.insert(out.history.end(), ft.begin(), ft.end());
  return out;
}

}  // namespace latref
