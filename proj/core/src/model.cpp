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

#include "latref/model.hpp"

#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace latref {

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw Error("invalid model config: " + field + " " + what);
}

ParamPtr uniform_param(std::string name, Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return make_param(std::move(name), std::move(t));
}

ParamPtr const_param(std::string name, Shape shape, double value) {
  return make_param(std::move(name), Tensor(std::move(shape), value));
}

template <typename F>
void visit(SubBlockParams& s, F&& f) {
  for (ParamPtr* p : {&s.in_w, &s.in_gamma, &s.in_beta, &s.in_slope}) f(*p);
  for (auto* list : {&s.down_w, &s.down_gamma}) {
    for (auto& p : *list) f(p);
  }
  for (auto& p : s.up_w) f(p);
  for (ParamPtr* p : {&s.out_gamma, &s.out_beta, &s.out_slope, &s.res_w, &s.res_b}) f(*p);
}

template <typename F>
void visit(EncoderParams& e, F&& f) {
  for (ParamPtr* p : {&e.conv_w, &e.norm_gamma, &e.norm_beta, &e.bottleneck_w, &e.bottleneck_b}) {
    f(*p);
  }
}

template <typename F>
void visit(HeadParams& h, F&& f) {
  for (ParamPtr* p : {&h.mask_w, &h.mask_b, &h.decoder_w, &h.decoder_b}) f(*p);
}

template <typename T>
std::vector<ParamPtr> collect(const T& params) {
  std::vector<ParamPtr> out;
  visit(const_cast<T&>(params), [&](ParamPtr& p) { out.push_back(p); });
  return out;
}

SubBlockParams make_sub_block(const SeparationConfig& c, const std::string& prefix, Rng& rng) {
  const std::size_t h = c.hidden_channels, ch = c.latent_channels, k = c.sub_block_kernel;
  SubBlockParams s;
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(ch));
  const double dw_bound = 1.0 / std::sqrt(static_cast<double>(k));
  s.in_w = uniform_param(prefix + ".in.w", {h, ch, 1}, in_bound, rng);
  s.in_gamma = const_param(prefix + ".in.gamma", {h}, 1.0);
  s.in_beta = const_param(prefix + ".in.beta", {h}, 0.0);
  s.in_slope = const_param(prefix + ".in.slope", {h}, 0.25);
  for (std::size_t i = 0; i < c.scales; ++i) {
    const std::string p = prefix + ".down" + std::to_string(i);
    s.down_w.push_back(uniform_param(p + ".w", {h, 1, k}, dw_bound, rng));
    s.down_gamma.push_back(const_param(p + ".gamma", {h}, 1.0));
  }
  for (std::size_t i = 0; i + 1 < c.scales; ++i) {
    const std::string p = prefix + ".up" + std::to_string(i);
    s.up_w.push_back(uniform_param(p + ".w", {h, 1, k}, dw_bound, rng));
  }
  s.out_gamma = const_param(prefix + ".out.gamma", {h}, 1.0);
  s.out_beta = const_param(prefix + ".out.beta", {h}, 0.0);
  s.out_slope = const_param(prefix + ".out.slope", {h}, 0.25);
  // Zero residual projection: an untrained sub-block is the identity.
  s.res_w = const_param(prefix + ".res.w", {ch, h, 1}, 0.0);
  s.res_b = const_param(prefix + ".res.b", {ch}, 0.0);
  return s;
}

HeadParams make_head(const SeparationConfig& c, std::size_t index, Rng& rng) {
  const std::string p = "head" + std::to_string(index);
  const std::size_t rows = c.num_sources * c.enc_bases;
  const double mask_bound = 1.0 / std::sqrt(static_cast<double>(c.latent_channels));
  const double dec_bound = 1.0 / std::sqrt(static_cast<double>(c.enc_bases));
  HeadParams h;
  h.mask_w = uniform_param(p + ".mask.w", {rows, c.latent_channels, 1}, mask_bound, rng);
  h.mask_b = uniform_param(p + ".mask.b", {rows}, mask_bound, rng);
  h.decoder_w = uniform_param(p + ".decoder.w", {c.enc_bases, 1, c.enc_kernel}, dec_bound, rng);
  h.decoder_b = const_param(p + ".decoder.b", {1}, 0.0);
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// SeparationConfig

void SeparationConfig::validate() const {
  require(enc_bases >= 1, "enc_bases", "must be >= 1");
  require(enc_kernel >= 1, "enc_kernel", "must be >= 1");
  require(enc_stride >= 1, "enc_stride", "must be >= 1");
  require(enc_stride <= enc_kernel, "enc_stride", "must not exceed enc_kernel");
  require(latent_channels >= 1, "latent_channels", "must be >= 1");
  require(hidden_channels >= 1, "hidden_channels", "must be >= 1");
  require(sub_block_kernel >= 1, "sub_block_kernel", "must be >= 1");
  require(scales >= 1, "scales", "must be >= 1");
  require(num_sources >= 1, "num_sources", "must be >= 1");
  require(!blocks.empty(), "blocks", "must not be empty");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string f = "blocks[" + std::to_string(i) + "]";
    require(blocks[i].sub_blocks >= 1, f + ".sub_blocks", "must be >= 1");
    require(blocks[i].iterations >= 1, f + ".iterations", "must be >= 1");
    if (const auto& s = blocks[i].shares_params_with) {
      require(*s < i, f + ".shares_params_with", "must point to an earlier block");
      require(blocks[*s].sub_blocks == blocks[i].sub_blocks, f + ".shares_params_with",
              "must reference a block with the same sub_blocks");
    }
  }
}

std::size_t SeparationConfig::total_steps() const { return steps_through_block(blocks.size()); }

std::size_t SeparationConfig::steps_through_block(std::size_t count) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < count && i < blocks.size(); ++i) n += blocks[i].iterations;
  return n;
}

std::size_t SeparationConfig::block_for_step(std::size_t step) const {
  std::size_t acc = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    acc += blocks[i].iterations;
    if (step < acc) return i;
  }
  throw Error("refinement step " + std::to_string(step) + " exceeds total steps " +
              std::to_string(acc));
}

std::size_t SeparationConfig::latent_length(std::size_t samples) const {
  return (samples + enc_stride - 1) / enc_stride;
}

// ---------------------------------------------------------------------------
// Parameter containers

std::vector<ParamPtr> SubBlockParams::parameters() const { return collect(*this); }

std::vector<ParamPtr> BlockParams::parameters() const {
  std::vector<ParamPtr> out;
  for (const auto& s : sub_blocks) {
    auto p = s.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<ParamPtr> EncoderParams::parameters() const { return collect(*this); }
std::vector<ParamPtr> HeadParams::parameters() const { return collect(*this); }

std::vector<ParamPtr> ModelParams::parameters() const {
  std::vector<ParamPtr> out;
  std::unordered_set<const Parameter*> seen;
  auto take = [&](const std::vector<ParamPtr>& ps) {
    for (const auto& p : ps) {
      if (seen.insert(p.get()).second) out.push_back(p);
    }
  };
  take(encoder.parameters());
  for (const auto& b : blocks) take(b->parameters());
  for (const auto& h : heads) take(h.parameters());
  return out;
}

std::vector<std::string> ModelParams::group_names() const {
  std::vector<std::string> names{"encoder"};
  for (std::size_t i = 0; i < blocks.size(); ++i) names.push_back("block" + std::to_string(i));
  for (std::size_t i = 0; i < heads.size(); ++i) names.push_back("head" + std::to_string(i));
  return names;
}

std::vector<ParamPtr> ModelParams::group(const std::string& name) const {
  if (name == "encoder") return encoder.parameters();
  auto index_of = [&](std::size_t prefix_len, std::size_t limit) -> std::size_t {
    std::size_t idx = 0;
    try {
      idx = std::stoul(name.substr(prefix_len));
    } catch (const std::exception&) {
      throw Error("unknown parameter group '" + name + "'");
    }
    if (idx >= limit) throw Error("parameter group '" + name + "' out of range");
    return idx;
  };
  if (name.rfind("block", 0) == 0) return blocks[index_of(5, blocks.size())]->parameters();
  if (name.rfind("head", 0) == 0) return heads[index_of(4, heads.size())].parameters();
  throw Error("unknown parameter group '" + name + "'");
}

ModelParams ModelParams::clone() const {
  std::unordered_map<const Parameter*, ParamPtr> copies;
  auto copy = [&](ParamPtr& p) {
    auto it = copies.find(p.get());
    if (it == copies.end()) {
      it = copies.emplace(p.get(), std::make_shared<Parameter>(*p)).first;
    }
    p = it->second;
  };
  ModelParams out;
  out.config = config;
  out.encoder = encoder;
  visit(out.encoder, copy);
  std::unordered_map<const BlockParams*, std::shared_ptr<BlockParams>> block_copies;
  for (const auto& b : blocks) {
    auto it = block_copies.find(b.get());
    if (it == block_copies.end()) {
      auto nb = std::make_shared<BlockParams>(*b);
      for (auto& s : nb->sub_blocks) visit(s, copy);
      it = block_copies.emplace(b.get(), nb).first;
    }
    out.blocks.push_back(it->second);
  }
  out.heads = heads;
  for (auto& h : out.heads) visit(h, copy);
  return out;
}

ModelParams make_model(const SeparationConfig& config, std::uint64_t seed, std::size_t num_heads) {
  config.validate();
  Rng rng(seed);
  ModelParams m;
  m.config = config;
  const std::size_t bases = config.enc_bases, ch = config.latent_channels;
  m.encoder.conv_w = uniform_param("encoder.conv.w", {bases, 1, config.enc_kernel},
                                   1.0 / std::sqrt(static_cast<double>(config.enc_kernel)), rng);
  m.encoder.norm_gamma = const_param("encoder.norm.gamma", {bases}, 1.0);
  m.encoder.norm_beta = const_param("encoder.norm.beta", {bases}, 0.0);
  const double bn_bound = 1.0 / std::sqrt(static_cast<double>(bases));
  m.encoder.bottleneck_w = uniform_param("encoder.bottleneck.w", {ch, bases, 1}, bn_bound, rng);
  m.encoder.bottleneck_b = uniform_param("encoder.bottleneck.b", {ch}, bn_bound, rng);
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const BlockSpec& spec = config.blocks[i];
    if (spec.shares_params_with) {
      m.blocks.push_back(m.blocks[*spec.shares_params_with]);
      continue;
    }
    auto block = std::make_shared<BlockParams>();
    for (std::size_t j = 0; j < spec.sub_blocks; ++j) {
      block->sub_blocks.push_back(
          make_sub_block(config, "block" + std::to_string(i) + ".sub" + std::to_string(j), rng));
    }
    m.blocks.push_back(std::move(block));
  }
  for (std::size_t j = 0; j < num_heads; ++j) m.heads.push_back(make_head(config, j, rng));
  return m;
}

void add_head(ModelParams& model, Rng& rng) {
  model.heads.push_back(make_head(model.config, model.heads.size(), rng));
}

void randomize(ModelParams& model, Rng& rng) {
  for (const auto& p : model.parameters()) {
    const std::string& n = p->name;
    const Tensor& v = p->value;
    const double fan_in = v.rank() == 3 ? static_cast<double>(v.dim(1) * v.dim(2)) : 1.0;
    for (auto& x : p->value.data()) {
      if (n.ends_with(".gamma")) {
        // Random sign, magnitude bounded away from zero.
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        x = sign * rng.uniform(0.5, 1.5);
      } else if (n.ends_with(".beta")) {
        x = rng.uniform(-1.0, 1.0);
      } else if (n.ends_with(".slope")) {
        x = rng.uniform(0.1, 0.5);
      } else {
        x = rng.uniform(-1.0, 1.0) / std::sqrt(fan_in);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Forward

Encoded encode(const ModelParams& model, Var mixture) {
  const auto& c = model.config;
  const Tensor& x = mixture.value();
  if (x.rank() != 2 || x.dim(0) != 1) {
    throw Error("encode: expected a 1 x T mixture, got " + shape_to_string(x.shape()));
  }
  if (x.dim(1) == 0) throw Error("encode: empty mixture");
  Tape& tape = mixture.tape();
  const auto& e = model.encoder;
  Var v_enc = relu(conv1d(mixture, tape.param(e.conv_w), Var{},
                          ConvOptions{.stride = c.enc_stride, .padding = Padding::kSame}));
  Var normed = global_layer_norm(v_enc, tape.param(e.norm_gamma), tape.param(e.norm_beta));
  Var latent = conv1d(normed, tape.param(e.bottleneck_w), tape.param(e.bottleneck_b), ConvOptions{});
  return {v_enc, latent};
}

Var apply_sub_block(const SubBlockParams& s, Var v) {
  Tape& t = v.tape();
  const std::size_t hidden = s.in_w->value.dim(0);
  const ConvOptions pointwise{};
  const ConvOptions depthwise{.stride = 1, .padding = Padding::kSame, .groups = hidden};
  const ConvOptions down{.stride = 2, .padding = Padding::kSame, .groups = hidden};

  Var h = conv1d(v, t.param(s.in_w), Var{}, pointwise);
  h = prelu(global_layer_norm(h, t.param(s.in_gamma), t.param(s.in_beta)), t.param(s.in_slope));

  const std::size_t scales = s.down_w.size();
  std::vector<Var> levels;
  levels.reserve(scales);
  Var d = h;
  for (std::size_t i = 0; i < scales; ++i) {
    d = conv1d(d, t.param(s.down_w[i]), Var{}, i == 0 ? depthwise : down);
    d = global_layer_norm(d, t.param(s.down_gamma[i]), Var{});
    levels.push_back(d);
  }
  Var u = levels.back();
  for (std::size_t i = scales - 1; i-- > 0;) {
    Var up = upsample_nearest(u, levels[i].shape()[1]);
    u = levels[i] + conv1d(up, t.param(s.up_w[i]), Var{}, depthwise);
  }
  Var out = prelu(global_layer_norm(u, t.param(s.out_gamma), t.param(s.out_beta)),
                  t.param(s.out_slope));
  out = conv1d(out, t.param(s.res_w), t.param(s.res_b), pointwise);
  return v + out;
}

Var apply_block(const BlockParams& block, Var v, std::size_t latent_channels) {
  const Tensor& vv = v.value();
  if (vv.rank() != 2 || vv.dim(0) != latent_channels) {
    throw Error("apply_block: latent " + shape_to_string(vv.shape()) + " does not have " +
                std::to_string(latent_channels) + " channels");
  }
  for (const auto& s : block.sub_blocks) v = apply_sub_block(s, v);
  return v;
}

Var separate_range(const ModelParams& model, Var v, std::size_t begin, std::size_t end) {
  const std::size_t total = model.config.total_steps();
  if (end > total) {
    throw Error("separate: depth " + std::to_string(end) + " exceeds total steps " +
                std::to_string(total));
  }
  if (model.blocks.size() < model.config.blocks.size()) {
    throw Error("separate: model holds fewer blocks than its config");
  }
  for (std::size_t step = begin; step < end; ++step) {
    const std::size_t b = model.config.block_for_step(step);
    v = apply_block(*model.blocks[b], v, model.config.latent_channels);
  }
  return v;
}

Var separate(const ModelParams& model, Var v, std::optional<std::size_t> depth) {
  return separate_range(model, v, 0, depth.value_or(model.config.total_steps()));
}

Var compute_masks(const ModelParams& model, Var s_latent, std::size_t stage) {
  if (stage >= model.heads.size()) {
    throw Error("mask_and_decode: stage " + std::to_string(stage) + " out of range (" +
                std::to_string(model.heads.size()) + " heads)");
  }
  Tape& t = s_latent.tape();
  const HeadParams& h = model.heads[stage];
  return relu(conv1d(s_latent, t.param(h.mask_w), t.param(h.mask_b), ConvOptions{}));
}

Var decode_masked(const ModelParams& model, Var v_enc, Var masks, std::size_t stage,
                  std::size_t samples) {
  const auto& c = model.config;
  if (stage >= model.heads.size()) {
    throw Error("mask_and_decode: stage " + std::to_string(stage) + " out of range (" +
                std::to_string(model.heads.size()) + " heads)");
  }
  const Shape expected{c.num_sources * c.enc_bases, v_enc.shape().at(1)};
  if (masks.shape() != expected) {
    throw Error("decode_masked: masks " + shape_to_string(masks.shape()) + " expected " +
                shape_to_string(expected));
  }
  Tape& t = v_enc.tape();
  const HeadParams& h = model.heads[stage];
  Var dw = t.param(h.decoder_w);
  Var db = t.param(h.decoder_b);
  std::vector<Var> outputs;
  for (std::size_t j = 0; j < c.num_sources; ++j) {
    Var m = c.num_sources == 1 ? masks : rows(masks, j * c.enc_bases, c.enc_bases);
    Var y = transposed_conv1d(v_enc * m, dw, db,
                              ConvOptions{.stride = c.enc_stride, .padding = Padding::kSame});
    if (y.shape()[1] < samples) {
      throw Error("decode_masked: decoded length " + std::to_string(y.shape()[1]) +
                  " shorter than requested " + std::to_string(samples));
    }
    if (y.shape()[1] != samples) y = crop(y, samples);
    outputs.push_back(y);
  }
  return outputs.size() == 1 ? outputs[0] : stack_rows(outputs);
}

Var mask_and_decode(const ModelParams& model, Var v_enc, Var s_latent, std::size_t stage,
                    std::size_t samples) {
  return decode_masked(model, v_enc, compute_masks(model, s_latent, stage), stage, samples);
}

Var forward(const ModelParams& model, Var mixture, std::size_t stage,
            std::optional<std::size_t> depth) {
  Encoded enc = encode(model, mixture);
  Var s = separate(model, enc.latent, depth);
  return mask_and_decode(model, enc.v_enc, s, stage, mixture.shape()[1]);
}

Tensor separate_sources(const ModelParams& model, const Tensor& mixture, std::size_t stage,
                        std::optional<std::size_t> depth) {
  Tape tape;
  Var x = tape.constant(mixture.reshaped(Shape{1, mixture.size()}));
  return forward(model, x, stage, depth).value();
}

// ---------------------------------------------------------------------------
// Parameter counting

std::size_t ParamCounts::block_total() const {
  std::size_t n = 0;
  for (auto b : blocks) n += b;
  return n;
}

std::size_t ParamCounts::total() const {
  std::size_t n = encoder + block_total();
  for (auto m : mask_nets) n += m;
  for (auto d : decoders) n += d;
  return n;
}

std::size_t sub_block_param_count(const SeparationConfig& c) {
  const std::size_t h = c.hidden_channels, ch = c.latent_channels, k = c.sub_block_kernel;
  const std::size_t in = h * ch + 2 * h + h;
  const std::size_t down = c.scales * (h * k + h);
  const std::size_t up = (c.scales - 1) * h * k;
  const std::size_t out = 2 * h + h + ch * h + ch;
  return in + down + up + out;
}

ParamCounts count_params(const SeparationConfig& c, std::size_t num_heads) {
  c.validate();
  ParamCounts counts;
  counts.encoder = c.enc_bases * c.enc_kernel + 2 * c.enc_bases +
                   c.latent_channels * c.enc_bases + c.latent_channels;
  const std::size_t per_sub = sub_block_param_count(c);
  for (const auto& b : c.blocks) {
    if (!b.shares_params_with) counts.blocks.push_back(b.sub_blocks * per_sub);
  }
  for (std::size_t j = 0; j < num_heads; ++j) {
    const std::size_t rows = c.num_sources * c.enc_bases;
    counts.mask_nets.push_back(rows * c.latent_channels + rows);
    counts.decoders.push_back(c.enc_bases * c.enc_kernel + 1);
  }
  return counts;
}

}  // namespace latref
