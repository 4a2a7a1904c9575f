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


// Experiment description, run orchestration, and report rendering used by
// the command-line tool.

#ifndef LATREF_EXPERIMENT_HPP_
#define LATREF_EXPERIMENT_HPP_

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "latref/data.hpp"
#include "latref/memory.hpp"
#include "latref/training.hpp"

namespace latref {

enum class Mode { kEndToEnd, kProgressive, kAdaptive };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& name);

struct DatasetConfig {
  MixtureSpec spec;
  std::size_t train_size = 256;
  std::size_t val_size = 64;

  bool operator==(const DatasetConfig&) const = default;
};

struct ExperimentConfig {
  Task task = Task::kSeparation;
  Mode mode = Mode::kEndToEnd;
  SeparationConfig model;
  TrainConfig train;
  GateTrainConfig gate;
  DatasetConfig dataset;
  std::string output_dir = "runs/latref";

  /// Cross-field checks; throws Error naming the field.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Strict: unknown keys and wrong types are errors. Missing keys keep their
/// defaults. dataset.task follows the top-level task.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string render_experiment_config(const ExperimentConfig& config);

struct QuartileBin {
  std::size_t count = 0;
  double snr_lo = 0.0;
  double snr_hi = 0.0;
  double mean_sisdri = 0.0;
  double mean_g = 0.0;
};

/// Sorts by noise SNR (ties by index) and splits into four bins;
/// bin q holds sorted positions [q n / 4, (q + 1) n / 4).
std::array<QuartileBin, 4> quartile_analysis(const std::vector<EvalRecord>& records);

struct MetricsRow {
  std::string label;
  std::size_t blocks = 0;
  std::vector<std::size_t> sub_blocks;
  std::vector<std::size_t> iterations;
  double sisdri = 0.0;
  std::size_t params = 0;
  std::size_t activation_bytes = 0;
  std::optional<double> mean_g;
  std::optional<std::array<QuartileBin, 4>> quartiles;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<EvalRecord> samples;
};

MetricsRow make_metrics_row(const std::string& label, const SeparationConfig& config,
                            std::size_t num_heads, std::size_t samples,
                            const std::vector<EvalRecord>& records, bool gated);

std::string metrics_to_json(const MetricsReport& report);
MetricsReport metrics_from_json(const std::string& text);
/// Aligned table with the columns Blocks, Sub-Blocks, Iter., SI-SDRi, Params
/// plus mean g when any row has it, followed by quartile tables.
std::string render_report(const std::vector<MetricsRow>& rows);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> checkpoint;
  bool passthrough = false;
  std::ostream* log = nullptr;
};

/// Dispatches on config.mode.
void run_train(const ExperimentConfig& config, const RunOptions& options);
void run_train_progressive(const ExperimentConfig& config, const RunOptions& options);
/// Pretrains unless options.checkpoint names a pretrained model.
void run_finetune_gate(const ExperimentConfig& config, const RunOptions& options);
void run_eval(const ExperimentConfig& config, const RunOptions& options);

struct GradCheckSummary {
  std::vector<std::pair<std::string, double>> cases;
  double max_error = 0.0;
};

/// Finite-difference verification of every differentiable op and of a toy
/// end-to-end model (encoder through PIT loss).
GradCheckSummary run_gradcheck_suite(std::uint64_t seed);

}  // namespace latref

#endif  // LATREF_EXPERIMENT_HPP_
