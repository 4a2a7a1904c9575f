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


// Strict JSON mapping for configuration structs (internal).

#ifndef LATREF_SRC_JSON_IO_HPP_
#define LATREF_SRC_JSON_IO_HPP_

#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "latref/data.hpp"
#include "latref/model.hpp"
#include "latref/training.hpp"

namespace latref::json_io {

using Json = nlohmann::ordered_json;

/// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(path_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(field(key) + ": wrong type (got " + std::string(it->type_name()) + ")");
    }
  }

  template <typename T>
  void read_optional(const char* key, std::optional<T>& out) {
    if (j_.contains(key)) {
      T value{};
      read(key, value);
      out = value;
    } else {
      seen_.insert(key);
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw Error("unknown config key '" + field(it.key()) + "'");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Json to_json(const SeparationConfig& c) {
  Json blocks = Json::array();
  for (const auto& b : c.blocks) {
    Json jb;
    jb["sub_blocks"] = b.sub_blocks;
    jb["iterations"] = b.iterations;
    if (b.shares_params_with) jb["shares_params_with"] = *b.shares_params_with;
    blocks.push_back(jb);
  }
  Json j;
  j["enc_bases"] = c.enc_bases;
  j["enc_kernel"] = c.enc_kernel;
  j["enc_stride"] = c.enc_stride;
  j["latent_channels"] = c.latent_channels;
  j["hidden_channels"] = c.hidden_channels;
  j["sub_block_kernel"] = c.sub_block_kernel;
  j["scales"] = c.scales;
  j["num_sources"] = c.num_sources;
  j["blocks"] = blocks;
  return j;
}

inline SeparationConfig separation_from_json(const Json& j, const std::string& path) {
  SeparationConfig c;
  ObjectReader r(j, path);
  r.read("enc_bases", c.enc_bases);
  r.read("enc_kernel", c.enc_kernel);
  r.read("enc_stride", c.enc_stride);
  r.read("latent_channels", c.latent_channels);
  r.read("hidden_channels", c.hidden_channels);
  r.read("sub_block_kernel", c.sub_block_kernel);
  r.read("scales", c.scales);
  r.read("num_sources", c.num_sources);
  if (const Json* jb = r.child("blocks")) {
    if (!jb->is_array()) throw Error(r.field("blocks") + ": expected an array");
    c.blocks.clear();
    for (std::size_t i = 0; i < jb->size(); ++i) {
      ObjectReader br((*jb)[i], r.field("blocks[" + std::to_string(i) + "]"));
      BlockSpec b;
      br.read("sub_blocks", b.sub_blocks);
      br.read("iterations", b.iterations);
      br.read_optional("shares_params_with", b.shares_params_with);
      br.finish();
      c.blocks.push_back(b);
    }
  }
  r.finish();
  return c;
}

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr0"] = c.lr0;
  j["lr_decay_every"] = c.lr_decay_every;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["clip_norm"] = c.clip_norm;
  j["seed"] = c.seed;
  j["augment"] = c.augment;
  return j;
}

inline TrainConfig train_from_json(const Json& j, const std::string& path) {
  TrainConfig c;
  ObjectReader r(j, path);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("lr0", c.lr0);
  r.read("lr_decay_every", c.lr_decay_every);
  r.read("lr_decay_factor", c.lr_decay_factor);
  r.read("clip_norm", c.clip_norm);
  r.read("seed", c.seed);
  r.read("augment", c.augment);
  r.finish();
  return c;
}

inline Json to_json(const GateTrainConfig& c) {
  Json j;
  j["pretrain_fraction"] = c.pretrain_fraction;
  j["lr0"] = c.lr0;
  j["lr_decay_every"] = c.lr_decay_every;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["temperature"] = c.gate.temperature;
  j["penalty_weight"] = c.gate.penalty_weight;
  j["penalty_target"] = c.gate.penalty_target;
  return j;
}

inline GateTrainConfig gate_from_json(const Json& j, const std::string& path) {
  GateTrainConfig c;
  ObjectReader r(j, path);
  r.read("pretrain_fraction", c.pretrain_fraction);
  r.read("lr0", c.lr0);
  r.read("lr_decay_every", c.lr_decay_every);
  r.read("lr_decay_factor", c.lr_decay_factor);
  r.read("temperature", c.gate.temperature);
  r.read("penalty_weight", c.gate.penalty_weight);
  r.read("penalty_target", c.gate.penalty_target);
  r.finish();
  return c;
}

}  // namespace latref::json_io

#endif  // LATREF_SRC_JSON_IO_HPP_
