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


#include "latref/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json_io.hpp"
#include "latref/checkpoint.hpp"

namespace latref {

namespace {

using json_io::Json;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

Json dataset_to_json(const DatasetConfig& d) {
  Json j;
  j["sample_rate"] = d.spec.sample_rate;
  j["duration"] = d.spec.duration;
  j["speaker_snr_range"] = d.spec.speaker_snr_range;
  j["noise_snr_range"] = d.spec.noise_snr_range;
  j["seed"] = d.spec.seed;
  j["train_size"] = d.train_size;
  j["val_size"] = d.val_size;
  return j;
}

DatasetConfig dataset_from_json(const Json& j, const std::string& path) {
  DatasetConfig d;
  json_io::ObjectReader r(j, path);
  r.read("sample_rate", d.spec.sample_rate);
  r.read("duration", d.spec.duration);
  r.read("speaker_snr_range", d.spec.speaker_snr_range);
  r.read("noise_snr_range", d.spec.noise_snr_range);
  r.read("seed", d.spec.seed);
  r.read("train_size", d.train_size);
  r.read("val_size", d.val_size);
  r.finish();
  return d;
}

Json bin_to_json(const QuartileBin& b) {
  Json j;
  j["count"] = b.count;
  j["snr_lo"] = b.snr_lo;
  j["snr_hi"] = b.snr_hi;
  j["mean_sisdri"] = b.mean_sisdri;
  j["mean_g"] = b.mean_g;
  return j;
}

QuartileBin bin_from_json(const Json& j) {
  QuartileBin b;
  b.count = j.at("count").get<std::size_t>();
  b.snr_lo = j.at("snr_lo").get<double>();
  b.snr_hi = j.at("snr_hi").get<double>();
  b.mean_sisdri = j.at("mean_sisdri").get<double>();
  b.mean_g = j.at("mean_g").get<double>();
  return b;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += "/";
    s += std::to_string(v[i]);
  }
  return s;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string format_params(std::size_t n) {
  if (n >= 1000000) return fixed(static_cast<double>(n) / 1e6, 2) + "M";
  if (n >= 1000) return fixed(static_cast<double>(n) / 1e3, 1) + "K";
  return std::to_string(n);
}

std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os << "  ";
      // First column left-aligned, numbers right-aligned.
      if (c == 0) {
        os << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
      } else {
        os << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
      }
    }
    os << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
  return os.str();
}

struct Datasets {
  Dataset train;
  Dataset val;
};

Datasets build_datasets(const ExperimentConfig& config) {
  return {make_dataset(config.dataset.spec, config.dataset.train_size, 0),
          make_dataset(config.dataset.spec, config.dataset.val_size, 1)};
}

class HistoryWriter {
 public:
  HistoryWriter(const std::filesystem::path& path, std::ostream* log) : out_(path), log_(log) {
    if (!out_) throw Error("cannot write " + path.string());
  }

  void operator()(const EpochRecord& r) {
    Json j;
    j["stage"] = r.stage;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["train_loss"] = r.train_loss;
    j["val_sisdri"] = r.val_sisdri;
    if (r.mean_g) j["mean_g"] = *r.mean_g;
    out_ << j.dump() << '\n';
    out_.flush();
    if (log_) {
      *log_ << "stage " << r.stage << " epoch " << r.epoch << "  lr " << r.lr << "  loss "
            << fixed(r.train_loss, 4) << "  val SI-SDRi " << fixed(r.val_sisdri, 3) << " dB";
      if (r.mean_g) *log_ << "  mean g " << fixed(*r.mean_g, 3);
      *log_ << '\n';
    }
  }

 private:
  std::ofstream out_;
  std::ostream* log_;
};

void prepare_output(const ExperimentConfig& config, const RunOptions& options,
                    const Datasets& data) {
  std::filesystem::create_directories(options.out_dir);
  write_file(options.out_dir / "config.json", render_experiment_config(config));
  write_manifest(options.out_dir / "train_manifest.jsonl", data.train);
  write_manifest(options.out_dir / "val_manifest.jsonl", data.val);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kEndToEnd:
      return "end_to_end";
    case Mode::kProgressive:
      return "progressive";
    case Mode::kAdaptive:
      return "adaptive";
  }
  return "unknown";
}

Mode mode_from_string(const std::string& name) {
  if (name == "end_to_end") return Mode::kEndToEnd;
  if (name == "progressive") return Mode::kProgressive;
  if (name == "adaptive") return Mode::kAdaptive;
  throw Error("unknown mode '" + name + "' (expected end_to_end, progressive or adaptive)");
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  dataset.spec.validate();
  if (dataset.spec.task != task) throw Error("dataset task does not match task");
  if (model.num_sources != dataset.spec.num_sources()) {
    throw Error("model.num_sources is " + std::to_string(model.num_sources) + " but task '" +
                to_string(task) + "' produces " + std::to_string(dataset.spec.num_sources()) +
                " sources");
  }
  if (dataset.train_size == 0) throw Error("dataset.train_size must be >= 1");
  if (mode == Mode::kProgressive) {
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
      if (model.blocks[i].shares_params_with) {
        throw Error("model.blocks[" + std::to_string(i) +
                    "].shares_params_with is not allowed in progressive mode");
      }
    }
  }
  if (!(gate.pretrain_fraction >= 0.0 && gate.pretrain_fraction <= 1.0)) {
    throw Error("gate.pretrain_fraction must lie in [0, 1]");
  }
  if (!(gate.gate.temperature > 0.0)) throw Error("gate.temperature must be positive");
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  json_io::ObjectReader r(j, "");
  std::string task = to_string(c.task), mode = to_string(c.mode);
  r.read("task", task);
  r.read("mode", mode);
  r.read("output_dir", c.output_dir);
  c.task = task_from_string(task);
  c.mode = mode_from_string(mode);
  if (const Json* m = r.child("model")) c.model = json_io::separation_from_json(*m, "model");
  if (const Json* t = r.child("train")) c.train = json_io::train_from_json(*t, "train");
  if (const Json* g = r.child("gate")) c.gate = json_io::gate_from_json(*g, "gate");
  if (const Json* d = r.child("dataset")) c.dataset = dataset_from_json(*d, "dataset");
  r.finish();
  c.dataset.spec.task = c.task;
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("config file not found: " + path.string());
  return parse_experiment_config(read_file(path));
}

std::string render_experiment_config(const ExperimentConfig& c) {
  Json j;
  j["task"] = to_string(c.task);
  j["mode"] = to_string(c.mode);
  j["model"] = json_io::to_json(c.model);
  j["train"] = json_io::to_json(c.train);
  j["gate"] = json_io::to_json(c.gate);
  j["dataset"] = dataset_to_json(c.dataset);
  j["output_dir"] = c.output_dir;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Metrics

std::array<QuartileBin, 4> quartile_analysis(const std::vector<EvalRecord>& records) {
  const std::size_t n = records.size();
  if (n < 4) throw Error("quartile_analysis: need at least 4 samples, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].noise_snr_db != records[b].noise_snr_db) {
      return records[a].noise_snr_db < records[b].noise_snr_db;
    }
    return records[a].index < records[b].index;
  });
  std::array<QuartileBin, 4> bins;
  for (std::size_t q = 0; q < 4; ++q) {
    const std::size_t lo = q * n / 4, hi = (q + 1) * n / 4;
    QuartileBin& b = bins[q];
    b.count = hi - lo;
    b.snr_lo = records[order[lo]].noise_snr_db;
    b.snr_hi = records[order[hi - 1]].noise_snr_db;
    double s = 0.0, g = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      s += records[order[i]].sisdri;
      g += static_cast<double>(records[order[i]].g);
    }
    b.mean_sisdri = s / static_cast<double>(b.count);
    b.mean_g = g / static_cast<double>(b.count);
  }
  return bins;
}

MetricsRow make_metrics_row(const std::string& label, const SeparationConfig& config,
                            std::size_t num_heads, std::size_t samples,
                            const std::vector<EvalRecord>& records, bool gated) {
  MetricsRow row;
  row.label = label;
  row.blocks = config.blocks.size();
  for (const auto& b : config.blocks) {
    row.sub_blocks.push_back(b.sub_blocks);
    row.iterations.push_back(b.iterations);
  }
  row.sisdri = mean_sisdri(records);
  row.params = count_params(config, num_heads).total();
  if (gated) row.params += gate_param_count(config.latent_channels, config.latent_length(samples));
  row.activation_bytes = memory_account(config, 1, samples).activation_bytes_backward;
  if (gated && !records.empty()) {
    double g = 0.0;
    for (const auto& r : records) g += static_cast<double>(r.g);
    row.mean_g = g / static_cast<double>(records.size());
  }
  if (records.size() >= 4) row.quartiles = quartile_analysis(records);
  return row;
}

std::string metrics_to_json(const MetricsReport& report) {
  Json rows = Json::array();
  for (const auto& r : report.rows) {
    Json j;
    j["label"] = r.label;
    j["blocks"] = r.blocks;
    j["sub_blocks"] = r.sub_blocks;
    j["iterations"] = r.iterations;
    j["sisdri"] = r.sisdri;
    j["params"] = r.params;
    j["activation_bytes"] = r.activation_bytes;
    if (r.mean_g) j["mean_g"] = *r.mean_g;
    if (r.quartiles) {
      Json q = Json::array();
      for (const auto& b : *r.quartiles) q.push_back(bin_to_json(b));
      j["quartiles"] = q;
    }
    rows.push_back(j);
  }
  Json samples = Json::array();
  for (const auto& s : report.samples) {
    Json j;
    j["index"] = s.index;
    j["sisdri"] = s.sisdri;
    j["noise_snr_db"] = s.noise_snr_db;
    j["speaker_snr_db"] = s.speaker_snr_db;
    j["g"] = s.g;
    samples.push_back(j);
  }
  Json out;
  out["rows"] = rows;
  out["samples"] = samples;
  return out.dump(2) + "\n";
}

MetricsReport metrics_from_json(const std::string& text) {
  MetricsReport report;
  try {
    const Json j = Json::parse(text);
    for (const auto& r : j.at("rows")) {
      MetricsRow row;
      row.label = r.at("label").get<std::string>();
      row.blocks = r.at("blocks").get<std::size_t>();
      row.sub_blocks = r.at("sub_blocks").get<std::vector<std::size_t>>();
      row.iterations = r.at("iterations").get<std::vector<std::size_t>>();
      row.sisdri = r.at("sisdri").get<double>();
      row.params = r.at("params").get<std::size_t>();
      row.activation_bytes = r.at("activation_bytes").get<std::size_t>();
      if (r.contains("mean_g")) row.mean_g = r.at("mean_g").get<double>();
      if (r.contains("quartiles")) {
        std::array<QuartileBin, 4> bins;
        const auto& q = r.at("quartiles");
        if (q.size() != 4) throw Error("metrics: quartiles must have 4 bins");
        for (std::size_t i = 0; i < 4; ++i) bins[i] = bin_from_json(q[i]);
        row.quartiles = bins;
      }
      report.rows.push_back(std::move(row));
    }
    if (j.contains("samples")) {
      for (const auto& s : j.at("samples")) {
        EvalRecord e;
        e.index = s.at("index").get<std::size_t>();
        e.sisdri = s.at("sisdri").get<double>();
        e.noise_snr_db = s.at("noise_snr_db").get<double>();
        e.speaker_snr_db = s.at("speaker_snr_db").get<double>();
        e.g = s.at("g").get<std::size_t>();
        report.samples.push_back(e);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("metrics file is malformed: ") + e.what());
  }
  return report;
}

std::string render_report(const std::vector<MetricsRow>& rows) {
  const bool any_g = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.mean_g; });
  std::vector<std::string> header{"Model", "Blocks", "Sub-Blocks", "Iter.", "SI-SDRi", "Params"};
  if (any_g) header.push_back("Mean g");
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    std::vector<std::string> c{r.label,        std::to_string(r.blocks), join(r.sub_blocks),
                               join(r.iterations), fixed(r.sisdri, 2),   format_params(r.params)};
    if (any_g) c.push_back(r.mean_g ? fixed(*r.mean_g, 2) : "-");
    cells.push_back(std::move(c));
  }
  std::string out = render_table(header, cells);
  for (const auto& r : rows) {
    if (!r.quartiles) continue;
    out += "\nSNR quartiles for " + r.label + " (bin 1 = lowest noise SNR)\n";
    const bool gated = r.mean_g.has_value();
    std::vector<std::vector<std::string>> q;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& b = (*r.quartiles)[i];
      q.push_back({std::to_string(i + 1), std::to_string(b.count),
                   fixed(b.snr_lo, 2) + ".." + fixed(b.snr_hi, 2), fixed(b.mean_sisdri, 2)});
      if (gated) q.back().push_back(fixed(b.mean_g, 2));
    }
    std::vector<std::string> qheader{"Bin", "N", "SNR (dB)", "SI-SDRi"};
    if (gated) qheader.push_back("Mean g");
    out += render_table(qheader, q);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

void run_train(const ExperimentConfig& config, const RunOptions& options) {
  switch (config.mode) {
    case Mode::kProgressive:
      run_train_progressive(config, options);
      return;
    case Mode::kAdaptive:
      run_finetune_gate(config, options);
      return;
    case Mode::kEndToEnd:
      break;
  }
  config.validate();
  const Datasets data = build_datasets(config);
  prepare_output(config, options, data);
  HistoryWriter history(options.out_dir / "history.jsonl", options.log);
  ModelParams model = make_model(config.model, config.train.seed, 1);
  train_end_to_end(model, data.train, data.val, config.train, 0, {}, std::ref(history));
  save_checkpoint(options.out_dir / "model.ckpt", model);
}

void run_train_progressive(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const Datasets data = build_datasets(config);
  prepare_output(config, options, data);
  HistoryWriter history(options.out_dir / "history.jsonl", options.log);
  ProgressiveResult result =
      train_progressive(config.model, data.train, data.val, config.train, std::ref(history));
  for (std::size_t i = 0; i < result.stages.size(); ++i) {
    save_checkpoint(options.out_dir / ("stage" + std::to_string(i) + ".ckpt"), result.stages[i]);
  }
  save_checkpoint(options.out_dir / "model.ckpt", result.stages.back());
}

void run_finetune_gate(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const Datasets data = build_datasets(config);
  prepare_output(config, options, data);
  HistoryWriter history(options.out_dir / "history.jsonl", options.log);
  if (options.checkpoint) {
    Checkpoint ck = load_checkpoint(*options.checkpoint);
    if (!(ck.model.config == config.model)) {
      throw Error("checkpoint " + options.checkpoint->string() +
                  " was trained with a different model config");
    }
    GateParams gate = ck.gate ? *ck.gate
                              : make_gate(config.model.latent_channels,
                                          config.model.latent_length(config.dataset.spec.samples()),
                                          mix_seed(config.train.seed, 0x47415445ull));
    const auto pre = static_cast<std::size_t>(
        std::llround(static_cast<double>(config.train.epochs) * config.gate.pretrain_fraction));
    finetune_gate(ck.model, gate, data.train, data.val, config.train, config.gate,
                  config.train.epochs - pre, std::ref(history));
    save_checkpoint(options.out_dir / "model.ckpt", ck.model, &gate);
    return;
  }
  AdaptiveTrainResult r =
      train_adaptive(config.model, data.train, data.val, config.train, config.gate,
                     std::ref(history));
  save_checkpoint(options.out_dir / "model.ckpt", r.model, &r.gate);
}

void run_eval(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const Dataset val = make_dataset(config.dataset.spec, config.dataset.val_size, 1);
  if (val.samples.empty()) throw Error("dataset.val_size must be >= 1 for eval");
  const std::size_t samples = config.dataset.spec.samples();
  MetricsReport report;
  if (options.passthrough) {
    for (std::size_t i = 0; i < val.samples.size(); ++i) {
      const Sample& s = val.samples[i];
      Tensor est({s.sources.dim(0), samples});
      for (std::size_t r = 0; r < est.dim(0); ++r) {
        std::copy(s.mixture.data().begin(), s.mixture.data().end(),
                  est.data().begin() + static_cast<std::ptrdiff_t>(r * samples));
      }
      EvalRecord rec;
      rec.index = i;
      rec.noise_snr_db = s.meta.noise_snr_db;
      rec.speaker_snr_db = s.meta.speaker_snr_db;
      rec.sisdri = mean_speech_sisdri(est, s.sources, s.mixture.data(), s.speech_count);
      report.samples.push_back(rec);
    }
    report.rows.push_back(
        make_metrics_row("passthrough", config.model, 1, samples, report.samples, false));
    report.rows.back().params = 0;
  } else {
    const auto path = options.checkpoint.value_or(options.out_dir / "model.ckpt");
    if (!std::filesystem::exists(path)) throw Error("missing checkpoint: " + path.string());
    Checkpoint ck = load_checkpoint(path);
    const GateParams* gate = ck.gate ? &*ck.gate : nullptr;
    report.samples = evaluate(ck.model, ck.model.heads.size() - 1, gate, val, config.gate.gate);
    report.rows.push_back(make_metrics_row(path.parent_path().filename().string(),
                                           ck.model.config, 1, samples, report.samples,
                                           gate != nullptr));
  }
  std::filesystem::create_directories(options.out_dir);
  write_file(options.out_dir / "metrics.json", metrics_to_json(report));
  const std::string table = render_report(report.rows);
  write_file(options.out_dir / "metrics.txt", table);
  if (options.log) *options.log << table;
}

}  // namespace latref
