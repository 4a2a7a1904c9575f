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

// latref: command-line front end for training, evaluation and reporting.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "latref/experiment.hpp"
#include "latref/tensor.hpp"

namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  bool passthrough = false;
};

latref::ExperimentConfig load_config(const CommonArgs& args) {
  if (args.config.empty()) throw latref::Error("--config is required");
  latref::ExperimentConfig config = latref::load_experiment_config(args.config);
  if (args.seed) {
    config.train.seed = *args.seed;
    config.dataset.spec.seed = *args.seed;
  }
  config.validate();
  return config;
}

latref::RunOptions run_options(const CommonArgs& args, const latref::ExperimentConfig& config) {
  latref::RunOptions options;
  options.out_dir = args.out.empty() ? fs::path(config.output_dir) : fs::path(args.out);
  if (!args.checkpoint.empty()) options.checkpoint = fs::path(args.checkpoint);
  options.passthrough = args.passthrough;
  options.log = &std::cout;
  return options;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw latref::Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A directory stands for the metrics.json inside it.
int report(const std::vector<std::string>& inputs, const std::string& out) {
  if (inputs.empty()) throw latref::Error("report: no metrics files given");
  latref::MetricsReport merged;
  for (const auto& input : inputs) {
    fs::path path = input;
    if (fs::is_directory(path)) path /= "metrics.json";
    if (!fs::exists(path)) throw latref::Error("report: missing metrics file " + path.string());
    latref::MetricsReport r;
    try {
      r = latref::metrics_from_json(read_text(path));
    } catch (const std::exception& e) {
      throw latref::Error(path.string() + ": " + e.what());
    }
    for (auto& row : r.rows) merged.rows.push_back(std::move(row));
  }
  const std::string table = latref::render_report(merged.rows);
  std::cout << table;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "report.txt", std::ios::binary) << table;
    std::ofstream(fs::path(out) / "report.json", std::ios::binary)
        << latref::metrics_to_json(merged);
  }
  return 0;
}

int gradcheck(std::uint64_t seed) {
  const latref::GradCheckSummary summary = latref::run_gradcheck_suite(seed);
  std::size_t width = 0;
  for (const auto& [name, err] : summary.cases) width = std::max(width, name.size());
  for (const auto& [name, err] : summary.cases) {
    std::cout << std::left << std::setw(static_cast<int>(width) + 2) << name << std::scientific
              << std::setprecision(3) << err << (err < kGradTolerance ? "" : "  FAIL") << '\n';
  }
  std::cout << "max relative error " << std::scientific << std::setprecision(3)
            << summary.max_error << '\n';
  return summary.max_error < kGradTolerance ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latref: latent iterative refinement for source separation"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* opt = cmd->add_option("--config", args.config, "Experiment config (JSON)");
    if (needs_config) opt->required();
    cmd->add_option("--seed", args.seed, "Overrides train.seed and dataset.seed");
    cmd->add_option("--out", args.out, "Output directory (default: output_dir from config)");
  };

  auto* train = app.add_subcommand("train", "Train in the mode given by the config");
  add_common(train, true);
  auto* progressive = app.add_subcommand("train-progressive", "Stage-wise freeze training");
  add_common(progressive, true);
  auto* finetune = app.add_subcommand("finetune-gate", "Train the gating module");
  add_common(finetune, true);
  finetune->add_option("--checkpoint", args.checkpoint, "Pretrained model to start from");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation set");
  add_common(eval, true);
  eval->add_option("--checkpoint", args.checkpoint, "Checkpoint (default: <out>/model.ckpt)");
  eval->add_flag("--passthrough", args.passthrough, "Score the mixture itself as the estimate");

  std::vector<std::string> inputs;
  auto* rep = app.add_subcommand("report", "Render stored metrics as aligned tables");
  rep->add_option("inputs", inputs, "metrics.json files or run directories");
  rep->add_option("--out", args.out, "Also write report.txt and report.json here");
  rep->add_option("--config", args.config, "Ignored; accepted for a uniform interface");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference verification suite");
  add_common(grad, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto config = load_config(args);
      latref::run_train(config, run_options(args, config));
    } else if (*progressive) {
      const auto config = load_config(args);
      latref::run_train_progressive(config, run_options(args, config));
    } else if (*finetune) {
      const auto config = load_config(args);
      latref::run_finetune_gate(config, run_options(args, config));
    } else if (*eval) {
      const auto config = load_config(args);
      latref::run_eval(config, run_options(args, config));
    } else if (*rep) {
      return report(inputs, args.out);
    } else if (*grad) {
      std::uint64_t seed = args.seed.value_or(0);
      if (!args.config.empty() && !args.seed) seed = load_config(args).train.seed;
      return gradcheck(seed);
    }
  } catch (const std::exception& e) {
    std::cerr << "latref: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
