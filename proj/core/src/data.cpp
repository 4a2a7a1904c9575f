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


#include "latref/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

namespace latref {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void normalize_rms(Tensor& x) {
  double p = 0.0;
  for (double v : x.data()) p += v * v;
  const double rms = std::sqrt(p / static_cast<double>(x.size()));
  if (rms == 0.0) throw Error("synthetic source has zero energy");
  for (auto& v : x.data()) v /= rms;
}

double power(const Tensor& x) {
  double p = 0.0;
  for (double v : x.data()) p += v * v;
  return p;
}

// Hann-shaped syllables separated by short pauses.
std::vector<double> syllable_envelope(std::size_t samples, double rate, Rng& rng) {
  std::vector<double> env(samples, 0.0);
  double t = rng.uniform(0.0, 0.1);
  const double end = static_cast<double>(samples) / rate;
  while (t < end) {
    const double len = rng.uniform(0.08, 0.25);
    const auto a = static_cast<std::size_t>(t * rate);
    const auto n = static_cast<std::size_t>(len * rate);
    for (std::size_t i = 0; i < n && a + i < samples; ++i) {
      const double w = std::sin(std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
      env[a + i] = w * w;
    }
    t += len + rng.uniform(0.02, 0.12);
  }
  return env;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

std::uint16_t get_u16(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | b[at + 1] << 8);
}

bool tag_is(const std::vector<std::uint8_t>& b, std::size_t at, const char* tag) {
  return std::equal(tag, tag + 4, b.begin() + static_cast<std::ptrdiff_t>(at));
}

}  // namespace

std::string to_string(Task task) {
  return task == Task::kSeparation ? "separation" : "enhancement";
}

Task task_from_string(const std::string& name) {
  if (name == "separation") return Task::kSeparation;
  if (name == "enhancement") return Task::kEnhancement;
  throw Error("unknown task '" + name + "' (expected separation or enhancement)");
}

void MixtureSpec::validate() const {
  if (!(sample_rate > 0.0)) throw Error("dataset.sample_rate must be positive");
  if (!(duration > 0.0)) throw Error("dataset.duration must be positive");
  const double n = duration * sample_rate;
  if (std::abs(n - std::round(n)) > 1e-9 * std::max(1.0, n)) {
    throw Error("dataset.duration * sample_rate must be an integer sample count");
  }
  if (!(speaker_snr_range[0] <= speaker_snr_range[1])) {
    throw Error("dataset.speaker_snr_range must satisfy lo <= hi");
  }
  if (!(noise_snr_range[0] <= noise_snr_range[1])) {
    throw Error("dataset.noise_snr_range must satisfy lo <= hi");
  }
}

std::size_t MixtureSpec::samples() const {
  return static_cast<std::size_t>(std::llround(duration * sample_rate));
}

Tensor synth_speech(std::size_t samples, double rate, const std::vector<std::size_t>& bands,
                    Rng& rng) {
  if (bands.empty()) throw Error("synth_speech: no frequency bands");
  const double width = (kBandHighHz - kBandLowHz) / static_cast<double>(kNumBands);
  const std::vector<double> env = syllable_envelope(samples, rate, rng);
  const double span_s = static_cast<double>(samples) / rate;
  Tensor x({samples}, 0.0);
  const std::size_t chirps = 3 + rng.below(6);
  for (std::size_t c = 0; c < chirps; ++c) {
    const std::size_t band = bands[rng.below(bands.size())];
    const double lo = kBandLowHz + width * static_cast<double>(band) + 0.1 * width;
    const double hi = lo + 0.8 * width;
    const double f0 = rng.uniform(lo, hi);
    const double f1 = rng.uniform(lo, hi);
    const double amp = rng.uniform(0.5, 1.0);
    const double phase = rng.uniform(0.0, kTwoPi);
    const double sweep = (f1 - f0) / (2.0 * span_s);
    for (std::size_t i = 0; i < samples; ++i) {
      const double t = static_cast<double>(i) / rate;
      x[i] += amp * env[i] * std::sin(phase + kTwoPi * (f0 * t + sweep * t * t));
    }
  }
  normalize_rms(x);
  return x;
}

Tensor synth_noise(std::size_t samples, Rng& rng) {
  const double a = rng.uniform(0.5, 0.95);
  Tensor x({samples}, 0.0);
  double y = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    y = a * y + (1.0 - a) * rng.uniform(-1.0, 1.0);
    x[i] = y;
  }
  normalize_rms(x);
  return x;
}

SourceSet synth_sources(const MixtureSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t n = spec.samples();
  std::vector<std::size_t> order(kNumBands);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = kNumBands - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

  SourceSet set;
  std::size_t next = 0;
  for (std::size_t s = 0; s < spec.speech_count(); ++s) {
    const std::size_t count = 2 + rng.below(3);
    std::vector<std::size_t> bands(order.begin() + static_cast<std::ptrdiff_t>(next),
                                   order.begin() + static_cast<std::ptrdiff_t>(next + count));
    std::sort(bands.begin(), bands.end());
    next += count;
    set.speech.push_back(synth_speech(n, spec.sample_rate, bands, rng));
    set.bands.push_back(std::move(bands));
  }
  set.noise = synth_noise(n, rng);
  return set;
}

Tensor mix_at_snr(const Tensor& s1, const Tensor& s2, double snr_db) {
  if (s1.size() != s2.size()) throw Error("mix_at_snr: length mismatch");
  const double p1 = power(s1), p2 = power(s2);
  if (p1 == 0.0 || p2 == 0.0) throw Error("mix_at_snr: zero-power input");
  const double gain = std::sqrt(p1 / (p2 * std::pow(10.0, snr_db / 10.0)));
  Tensor out = s2;
  for (auto& v : out.data()) v *= gain;
  return out;
}

Sample make_sample(const MixtureSpec& spec, Rng& rng) {
  SourceSet set = synth_sources(spec, rng);
  Sample sample;
  sample.speech_count = spec.speech_count();
  std::vector<Tensor> rows;
  rows.push_back(set.speech[0]);
  if (spec.task == Task::kSeparation) {
    sample.meta.speaker_snr_db = rng.uniform(spec.speaker_snr_range[0], spec.speaker_snr_range[1]);
    rows.push_back(mix_at_snr(set.speech[0], set.speech[1], sample.meta.speaker_snr_db));
  }
  sample.meta.noise_snr_db = rng.uniform(spec.noise_snr_range[0], spec.noise_snr_range[1]);
  rows.push_back(mix_at_snr(set.speech[0], set.noise, sample.meta.noise_snr_db));

  const std::size_t n = spec.samples();
  sample.sources = Tensor({rows.size(), n});
  sample.mixture = Tensor({n}, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      sample.sources[r * n + i] = rows[r][i];
      sample.mixture[i] += rows[r][i];
    }
  }
  return sample;
}

std::uint64_t sample_seed(const MixtureSpec& spec, std::uint64_t stream, std::size_t index) {
  return mix_seed(mix_seed(spec.seed, stream), index);
}

Sample make_sample(const MixtureSpec& spec, std::uint64_t stream, std::size_t index) {
  const std::uint64_t seed = sample_seed(spec, stream, index);
  Rng rng(seed);
  Sample s = make_sample(spec, rng);
  s.meta.seed = seed;
  return s;
}

Tensor chunk_or_pad(const Tensor& x, std::size_t target, Rng* rng) {
  if (target == 0) throw Error("chunk_or_pad: target length must be positive");
  const std::size_t n = x.size();
  Tensor out({target}, 0.0);
  std::size_t offset = 0;
  if (n > target && rng != nullptr) offset = rng->below(n - target + 1);
  for (std::size_t i = 0; i < target && offset + i < n; ++i) out[i] = x[offset + i];
  return out;
}

Dataset make_dataset(const MixtureSpec& spec, std::size_t count, std::uint64_t stream) {
  spec.validate();
  Dataset d{spec, {}};
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.samples.push_back(make_sample(spec, stream, i));
  return d;
}

void write_manifest(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& m = dataset.samples[i].meta;
    nlohmann::ordered_json j;
    j["index"] = i;
    j["seed"] = m.seed;
    j["task"] = to_string(dataset.spec.task);
    if (dataset.spec.task == Task::kSeparation) j["speaker_snr_db"] = m.speaker_snr_db;
    j["noise_snr_db"] = m.noise_snr_db;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// WAV

std::vector<std::uint8_t> encode_wav(const Tensor& x, std::uint32_t sample_rate) {
  const auto data_bytes = static_cast<std::uint32_t>(x.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  for (char c : std::string("RIFF")) out.push_back(static_cast<std::uint8_t>(c));
  put_u32(out, 36 + data_bytes);
  for (char c : std::string("WAVEfmt ")) out.push_back(static_cast<std::uint8_t>(c));
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, sample_rate);
  put_u32(out, sample_rate * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  for (char c : std::string("data")) out.push_back(static_cast<std::uint8_t>(c));
  put_u32(out, data_bytes);
  for (double v : x.data()) {
    const double q = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

WavData decode_wav(const std::vector<std::uint8_t>& b, std::optional<std::uint32_t> expected_rate) {
  if (b.size() < 12 || !tag_is(b, 0, "RIFF") || !tag_is(b, 8, "WAVE")) {
    throw Error("wav: not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  WavData wav;
  std::size_t at = 12;
  while (at + 8 <= b.size()) {
    const std::uint32_t size = get_u32(b, at + 4);
    const std::size_t body = at + 8;
    if (body + size > b.size()) throw Error("wav: truncated chunk");
    if (tag_is(b, at, "fmt ")) {
      if (size < 16) throw Error("wav: fmt chunk too short");
      const std::uint16_t format = get_u16(b, body);
      const std::uint16_t channels = get_u16(b, body + 2);
      wav.sample_rate = get_u32(b, body + 4);
      const std::uint16_t bits = get_u16(b, body + 14);
      if (format != 1) throw Error("wav: non-PCM format tag " + std::to_string(format));
      if (channels != 1) throw Error("wav: multi-channel file (" + std::to_string(channels) +
                                     " channels); only mono is supported");
      if (bits != 16) throw Error("wav: " + std::to_string(bits) +
                                  " bits per sample; only 16-bit PCM is supported");
      if (expected_rate && wav.sample_rate != *expected_rate) {
        throw Error("wav: sample rate " + std::to_string(wav.sample_rate) + " Hz, expected " +
                    std::to_string(*expected_rate) + " Hz");
      }
      have_fmt = true;
    } else if (tag_is(b, at, "data")) {
      if (!have_fmt) throw Error("wav: data chunk before fmt chunk");
      const std::size_t n = size / 2;
      wav.samples = Tensor({n});
      for (std::size_t i = 0; i < n; ++i) {
        const auto s = static_cast<std::int16_t>(get_u16(b, body + 2 * i));
        wav.samples[i] = static_cast<double>(s) / 32768.0;
      }
      return wav;
    }
    at = body + size + (size & 1);
  }
  throw Error("wav: missing data chunk");
}

WavData load_wav(const std::filesystem::path& path, std::optional<std::uint32_t> expected_rate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open wav file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_wav(bytes, expected_rate);
}

void save_wav(const std::filesystem::path& path, const Tensor& x, std::uint32_t sample_rate) {
  const auto bytes = encode_wav(x, sample_rate);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write wav file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace latref
