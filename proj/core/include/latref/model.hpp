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

// Mask-based separation network built from iterable blocks.
//
//   x --encoder--> v_enc --norm+bottleneck--> v --S--> s --mask net--> m
//   source_j = decoder(v_enc * m_j)
//
// S applies block 1 for n_1 steps, then block 2 for n_2 steps, and so on.
// Each block is a chain of k sub-blocks; each sub-block is a multi-scale
// depthwise-conv unit wrapped in a residual connection. A model may own
// several heads (mask net + decoder); progressive training adds one per
// stage.

#ifndef LATREF_MODEL_HPP_
#define LATREF_MODEL_HPP_

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "latref/autodiff.hpp"
#include "latref/random.hpp"

namespace latref {

struct BlockSpec {
  std::size_t sub_blocks = 1;
  std::size_t iterations = 1;
  /// Index of an earlier block whose parameters this block reuses.
  std::optional<std::size_t> shares_params_with;

  bool operator==(const BlockSpec&) const = default;
};

struct SeparationConfig {
  std::size_t enc_bases = 512;
  std::size_t enc_kernel = 21;
  std::size_t enc_stride = 10;
  std::size_t latent_channels = 128;
  /// Channel width inside each sub-block.
  std::size_t hidden_channels = 512;
  /// Depthwise kernel size inside each sub-block.
  std::size_t sub_block_kernel = 5;
  /// Number of resolutions in each sub-block (scales - 1 downsamplings).
  std::size_t scales = 5;
  std::size_t num_sources = 3;
  std::vector<BlockSpec> blocks{BlockSpec{}};

  /// Throws Error naming the offending field.
  void validate() const;
  /// Total refinement steps N = sum of iterations.
  std::size_t total_steps() const;
  /// Index of the block applied at refinement step `step` (0-based).
  std::size_t block_for_step(std::size_t step) const;
  /// Number of steps performed by blocks [0, blocks).
  std::size_t steps_through_block(std::size_t blocks) const;
  std::size_t latent_length(std::size_t samples) const;

  bool operator==(const SeparationConfig&) const = default;
};

// Convolutions that feed a normalization carry no bias: a per-channel
// constant would be removed by the norm anyway. For the same reason the
// per-level norms are scale-only, since every level is summed into the
// input of the output norm.
struct SubBlockParams {
  ParamPtr in_w, in_gamma, in_beta, in_slope;
  std::vector<ParamPtr> down_w, down_gamma;
  std::vector<ParamPtr> up_w;
  ParamPtr out_gamma, out_beta, out_slope;
  ParamPtr res_w, res_b;

  std::vector<ParamPtr> parameters() const;
};

struct BlockParams {
  std::vector<SubBlockParams> sub_blocks;

  std::vector<ParamPtr> parameters() const;
};

struct EncoderParams {
  ParamPtr conv_w;
  ParamPtr norm_gamma, norm_beta;
  ParamPtr bottleneck_w, bottleneck_b;

  std::vector<ParamPtr> parameters() const;
};

struct HeadParams {
  ParamPtr mask_w, mask_b;
  ParamPtr decoder_w, decoder_b;

  std::vector<ParamPtr> parameters() const;
};

struct ModelParams {
  SeparationConfig config;
  EncoderParams encoder;
  /// One entry per BlockSpec; shared blocks hold the same pointer.
  std::vector<std::shared_ptr<BlockParams>> blocks;
  std::vector<HeadParams> heads;

  /// Every distinct parameter in a fixed order: encoder, blocks, heads.
  std::vector<ParamPtr> parameters() const;
  /// Parameters of a named group: "encoder", "block<i>", "head<j>".
  std::vector<ParamPtr> group(const std::string& name) const;
  std::vector<std::string> group_names() const;
  /// Deep copy that keeps block aliasing.
  ModelParams clone() const;
};

ModelParams make_model(const SeparationConfig& config, std::uint64_t seed,
                       std::size_t num_heads = 1);
/// Appends a freshly initialized head.
void add_head(ModelParams& model, Rng& rng);
/// Re-draws every parameter, residual projections included, so that no
/// gradient path is degenerate: norm scales get a random sign and a
/// magnitude in [0.5, 1.5], shifts U(-1, 1), PReLU slopes U(0.1, 0.5), and
/// weights U(-1, 1) / sqrt(fan_in).
void randomize(ModelParams& model, Rng& rng);

struct Encoded {
  Var v_enc;   // enc_bases x L, the representation the masks act on
  Var latent;  // latent_channels x L, input to the separation module
};

/// mixture: 1 x T.
Encoded encode(const ModelParams& model, Var mixture);
Var apply_sub_block(const SubBlockParams& params, Var v);
Var apply_block(const BlockParams& block, Var v, std::size_t latent_channels);
/// Runs refinement steps [0, depth) (all N when depth is empty).
Var separate(const ModelParams& model, Var v, std::optional<std::size_t> depth = std::nullopt);
/// Runs refinement steps [begin, end).
Var separate_range(const ModelParams& model, Var v, std::size_t begin, std::size_t end);
/// Mask estimates for head `stage`: (num_sources * enc_bases) x L, nonnegative.
Var compute_masks(const ModelParams& model, Var s_latent, std::size_t stage);
/// Decodes v_enc * mask_j for every source with head `stage`'s decoder; the
/// result is num_sources x samples.
Var decode_masked(const ModelParams& model, Var v_enc, Var masks, std::size_t stage,
                  std::size_t samples);
Var mask_and_decode(const ModelParams& model, Var v_enc, Var s_latent, std::size_t stage,
                    std::size_t samples);

/// encode -> separate(depth) -> mask_and_decode(stage) for a 1 x T mixture.
Var forward(const ModelParams& model, Var mixture, std::size_t stage,
            std::optional<std::size_t> depth = std::nullopt);
/// Inference convenience on a plain rank-1 mixture; returns S x T.
Tensor separate_sources(const ModelParams& model, const Tensor& mixture, std::size_t stage,
                        std::optional<std::size_t> depth = std::nullopt);

struct ParamCounts {
  std::size_t encoder = 0;
  /// One entry per distinct block (shared blocks are counted once).
  std::vector<std::size_t> blocks;
  std::vector<std::size_t> mask_nets;
  std::vector<std::size_t> decoders;

  std::size_t block_total() const;
  std::size_t total() const;
};

std::size_t sub_block_param_count(const SeparationConfig& config);
ParamCounts count_params(const SeparationConfig& config, std::size_t num_heads = 1);

}  // namespace latref

#endif  // LATREF_MODEL_HPP_
