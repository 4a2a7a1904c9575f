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


// Synthetic mixtures at desk scale.
//
// Speech stand-ins are sums of linear chirps confined to frequency bands
// owned by one speaker and sharing a syllable-like envelope; noise is
// low-passed uniform noise. Every source is normalized to unit RMS before
// the SNR recipe scales it. Sample i of a dataset is a pure function of
// (spec, i).

#ifndef LATREF_DATA_HPP_
#define LATREF_DATA_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latref/random.hpp"
#include "latref/tensor.hpp"

namespace latref {

enum class Task { kSeparation, kEnhancement };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

struct MixtureSpec {
  double sample_rate = 8000.0;
  double duration = 4.0;
  std::array<double, 2> speaker_snr_range{0.0, 5.0};
  std::array<double, 2> noise_snr_range{-3.0, 6.0};
  Task task = Task::kSeparation;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t samples() const;
  std::size_t num_sources() const { return task == Task::kSeparation ? 3 : 2; }
  std::size_t speech_count() const { return task == Task::kSeparation ? 2 : 1; }

  bool operator==(const MixtureSpec&) const = default;
};

/// Frequency partition used by the speech surrogates.
inline constexpr double kBandLowHz = 150.0;
inline constexpr double kBandHighHz = 3850.0;
inline constexpr std::size_t kNumBands = 8;

struct SourceSet {
  std::vector<Tensor> speech;  // rank-1, unit RMS
  Tensor noise;                // rank-1, unit RMS
  std::vector<std::vector<std::size_t>> bands;  // band indices per speaker
};

/// One speech surrogate confined to `bands`.
Tensor synth_speech(std::size_t samples, double sample_rate,
                    const std::vector<std::size_t>& bands, Rng& rng);
Tensor synth_noise(std::size_t samples, Rng& rng);
SourceSet synth_sources(const MixtureSpec& spec, Rng& rng);

/// s2 rescaled so that 10 log10(|s1|^2 / |s2'|^2) = snr_db.
Tensor mix_at_snr(const Tensor& s1, const Tensor& s2, double snr_db);

struct SampleMeta {
  std::uint64_t seed = 0;
  double speaker_snr_db = 0.0;  // separation only
  double noise_snr_db = 0.0;
};

struct Sample {
  Tensor mixture;  // T
  Tensor sources;  // S x T, speech rows first
  std::size_t speech_count = 0;
  SampleMeta meta;
};

Sample make_sample(const MixtureSpec& spec, Rng& rng);
/// Deterministic sample `index` of stream `stream` (0 = train, 1 = validation).
Sample make_sample(const MixtureSpec& spec, std::uint64_t stream, std::size_t index);
std::uint64_t sample_seed(const MixtureSpec& spec, std::uint64_t stream, std::size_t index);

/// Random chunk when rng is given and x is long; offset 0 otherwise. Short
/// inputs are zero-padded at the tail.
Tensor chunk_or_pad(const Tensor& x, std::size_t target, Rng* rng = nullptr);

struct Dataset {
  MixtureSpec spec;
  std::vector<Sample> samples;
};

Dataset make_dataset(const MixtureSpec& spec, std::size_t count, std::uint64_t stream);

/// Line-delimited JSON: one record per sample (index, seed, SNRs).
void write_manifest(const std::filesystem::path& path, const Dataset& dataset);

struct WavData {
  Tensor samples;  // rank-1, values in [-1, 1)
  std::uint32_t sample_rate = 0;
};

/// 16-bit PCM mono only. `expected_rate` rejects files at other rates.
WavData load_wav(const std::filesystem::path& path,
                 std::optional<std::uint32_t> expected_rate = std::nullopt);
WavData decode_wav(const std::vector<std::uint8_t>& bytes,
                   std::optional<std::uint32_t> expected_rate = std::nullopt);
std::vector<std::uint8_t> encode_wav(const Tensor& x, std::uint32_t sample_rate);
void save_wav(const std::filesystem::path& path, const Tensor& x, std::uint32_t sample_rate);

}  // namespace latref

#endif  // LATREF_DATA_HPP_
