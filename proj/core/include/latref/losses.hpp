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


// Scale-invariant SDR and the permutation-invariant training loss.
//
// The plain-double and tape versions perform the same floating-point
// operations in the same order, so a value computed on the tape equals the
// double evaluation bit for bit. PIT relies on this to pick the permutation
// from doubles and then build the loss graph for that permutation only.

#ifndef LATREF_LOSSES_HPP_
#define LATREF_LOSSES_HPP_

#include <span>
#include <vector>

#include "latref/autodiff.hpp"

namespace latref {

struct SiSdrOptions {
  /// Added to both signal and error power.
  double eps = 1e-10;
  /// Result is clamped to [-clamp_db, clamp_db].
  double clamp_db = 100.0;
  /// Subtract the mean of est and ref first. Off by default.
  bool zero_mean = false;
};

struct SiSdrResult {
  double value_db = 0.0;
  double rho = 0.0;
};

SiSdrResult si_sdr(std::span<const double> est, std::span<const double> ref,
                   const SiSdrOptions& opt = {});
/// Differentiable SI-SDR of a 1-D (or 1 x T) estimate against a fixed reference.
Var si_sdr(Var est, std::span<const double> ref, const SiSdrOptions& opt = {});

/// Mean over rows of -SI-SDR for S x T estimates and references.
Var neg_sisdr_loss(Var ests, const Tensor& refs, const SiSdrOptions& opt = {});

struct PitResult {
  double loss = 0.0;
  /// permutation[j] is the estimate row assigned to reference row j.
  std::vector<std::size_t> permutation;
};

/// Exhaustive minimum over permutations of the first `speech_count` rows;
/// remaining rows are matched by identity. The loss is the mean over all
/// rows of -SI-SDR.
PitResult pit_loss(const Tensor& ests, const Tensor& refs, std::size_t speech_count,
                   const SiSdrOptions& opt = {});

struct PitVar {
  Var loss;
  std::vector<std::size_t> permutation;
};
PitVar pit_loss(Var ests, const Tensor& refs, std::size_t speech_count,
                const SiSdrOptions& opt = {});

/// Loss of one fixed assignment, in the same operation order pit_loss uses.
double assignment_loss(const Tensor& ests, const Tensor& refs,
                       std::span<const std::size_t> permutation, const SiSdrOptions& opt = {});

/// si_sdr(est, ref) - si_sdr(mix, ref).
double si_sdr_improvement(std::span<const double> est, std::span<const double> ref,
                          std::span<const double> mix, const SiSdrOptions& opt = {});

/// Mean SI-SDRi over the speech rows, using the PIT assignment of `ests`.
double mean_speech_sisdri(const Tensor& ests, const Tensor& refs, std::span<const double> mix,
                          std::size_t speech_count, const SiSdrOptions& opt = {});

}  // namespace latref

#endif  // LATREF_LOSSES_HPP_
