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

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

namespace latref {
namespace {

std::string error_of(const std::string& text) {
  try {
    parse_experiment_config(text);
  } catch (const Error& e) {
    return e.what();
  }
  return "no error";
}

TEST(ExperimentConfig, DefaultRoundTrip) {
  const ExperimentConfig c;
  EXPECT_EQ(parse_experiment_config(render_experiment_config(c)), c);
}

TEST(ExperimentConfig, NonDefaultRoundTrip) {
  ExperimentConfig c;
  c.task = Task::kEnhancement;
  c.mode = Mode::kAdaptive;
  c.model.num_sources = 2;
  c.model.scales = 2;
  c.model.blocks = {BlockSpec{2, 3, std::nullopt}, BlockSpec{2, 1, 0}};
  c.train.lr0 = 1.0 / 3.0;
  c.train.seed = 123456789012345ull;
  c.train.augment = false;
  c.gate.pretrain_fraction = 0.85;
  c.gate.gate.penalty_weight = 0.1 + 0.2;
  c.dataset.spec.task = Task::kEnhancement;
  c.dataset.spec.duration = 0.5;
  c.dataset.spec.noise_snr_range = {-5.5, 0.125};
  c.dataset.val_size = 7;
  c.output_dir = "runs/x y";
  const ExperimentConfig back = parse_experiment_config(render_experiment_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(render_experiment_config(back), render_experiment_config(c));
}

TEST(ExperimentConfig, StrictParsing) {
  EXPECT_NE(error_of(R"({"modle": {}})").find("modle"), std::string::npos);
  EXPECT_NE(error_of(R"({"model": {"enc_base": 4}})").find("model.enc_base"), std::string::npos);
  EXPECT_NE(error_of(R"({"train": {"epochs": "ten"}})").find("train.epochs"), std::string::npos);
  EXPECT_NE(error_of(R"({"model": {"blocks": [{"sub_blocks": 1, "iter": 2}]}})").find("iter"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"mode": "sideways"})").find("sideways"), std::string::npos);
  EXPECT_NE(error_of("{not json").find("JSON"), std::string::npos);
  EXPECT_NE(error_of(R"({"model": {"enc_bases": 0}})").find("enc_bases"), std::string::npos);
  EXPECT_NE(error_of(R"({"task": "enhancement"})").find("num_sources"), std::string::npos);
}

TEST(ExperimentConfig, MissingFileIsNamed) {
  try {
    load_experiment_config("/nonexistent/latref.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/latref.json"), std::string::npos);
  }
}

std::vector<EvalRecord> records(const std::vector<double>& snr, const std::vector<double>& sisdri,
                                const std::vector<std::size_t>& g) {
  std::vector<EvalRecord> out;
  for (std::size_t i = 0; i < snr.size(); ++i) {
    EvalRecord r;
    r.index = i;
    r.noise_snr_db = snr[i];
    r.sisdri = sisdri[i];
    r.g = g[i];
    out.push_back(r);
  }
  return out;
}

TEST(Quartiles, EightDistinctSnrsGiveBinsOfTwo) {
  const auto r = records({5, 1, 7, 3, 0, 2, 6, 4}, std::vector<double>(8, 1.0),
                         std::vector<std::size_t>(8, 4));
  for (const auto& b : quartile_analysis(r)) {
    EXPECT_EQ(b.count, 2u);
    EXPECT_EQ(b.mean_g, 4.0);
  }
}

TEST(Quartiles, HandComputedMeans) {
  // Sorted by SNR: (-2: 1.0, g1) (-1: 3.0, g2) | (0: 5.0, g3) (0: 7.0, g4)
  // | (2: 2.0, g2) (3: 4.0, g4) | (5: 6.0, g1) (9: 10.0, g3).
  // The two SNR-0 samples keep index order (indices 1 then 6).
  const auto r = records({5, 0, 3, -2, 9, -1, 0, 2}, {6, 5, 4, 1, 10, 3, 7, 2},
                         {1, 3, 4, 1, 3, 2, 4, 2});
  const auto q = quartile_analysis(r);
  EXPECT_DOUBLE_EQ(q[0].mean_sisdri, 2.0);
  EXPECT_DOUBLE_EQ(q[0].mean_g, 1.5);
  EXPECT_DOUBLE_EQ(q[1].mean_sisdri, 6.0);
  EXPECT_DOUBLE_EQ(q[1].mean_g, 3.5);
  EXPECT_DOUBLE_EQ(q[2].mean_sisdri, 3.0);
  EXPECT_DOUBLE_EQ(q[2].mean_g, 3.0);
  EXPECT_DOUBLE_EQ(q[3].mean_sisdri, 8.0);
  EXPECT_DOUBLE_EQ(q[3].mean_g, 2.0);
  EXPECT_EQ(q[0].snr_lo, -2.0);
  EXPECT_EQ(q[3].snr_hi, 9.0);
}

TEST(Quartiles, UnevenCountsAndTooFewSamples) {
  const auto r = records({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, std::vector<double>(10, 0.0),
                         std::vector<std::size_t>(10, 0));
  const auto q = quartile_analysis(r);
  std::size_t total = 0;
  for (const auto& b : q) total += b.count;
  EXPECT_EQ(total, 10u);
  EXPECT_EQ(q[0].count, 2u);
  EXPECT_THROW(quartile_analysis(records({1, 2, 3}, {0, 0, 0}, {0, 0, 0})), Error);
}

MetricsRow row(const std::string& label, std::size_t n, double sisdri) {
  MetricsRow r;
  r.label = label;
  r.blocks = 1;
  r.sub_blocks = {1};
  r.iterations = {n};
  r.sisdri = sisdri;
  r.params = 123456;
  r.activation_bytes = 1 << 20;
  return r;
}

TEST(Report, ThreeConfigurationSweepHasThreeRows) {
  const std::vector<MetricsRow> rows{row("n1", 1, 4.8), row("n2", 2, 5.7), row("n4", 4, 5.9)};
  const std::string text = render_report(rows);
  std::istringstream in(text);
  std::string header, rule, line;
  std::getline(in, header);
  std::getline(in, rule);
  for (const char* col : {"Blocks", "Sub-Blocks", "Iter.", "SI-SDRi", "Params"}) {
    EXPECT_NE(header.find(col), std::string::npos) << col;
  }
  EXPECT_LT(header.find("Blocks"), header.find("Sub-Blocks"));
  EXPECT_LT(header.find("Iter."), header.find("SI-SDRi"));
  EXPECT_LT(header.find("SI-SDRi"), header.find("Params"));
  EXPECT_EQ(header.find("Mean g"), std::string::npos);
  std::size_t data_rows = 0;
  while (std::getline(in, line) && !line.empty()) {
    EXPECT_EQ(line.size(), header.size());
    ++data_rows;
  }
  EXPECT_EQ(data_rows, 3u);
  EXPECT_NE(text.find("5.70"), std::string::npos);
}

TEST(Report, MetricsJsonRoundTripKeepsNumbers) {
  MetricsReport rep;
  rep.rows = {row("a", 1, 1.0 / 3.0), row("b", 4, -0.1)};
  rep.rows[1].mean_g = 3.25;
  rep.samples = records({0.5, 1.5, -1, 2}, {1, 2, 3, 4.125}, {1, 2, 3, 4});
  rep.rows[1].quartiles = quartile_analysis(rep.samples);
  const std::string json = metrics_to_json(rep);
  const MetricsReport back = metrics_from_json(json);
  ASSERT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.rows[0].sisdri, 1.0 / 3.0);
  EXPECT_EQ(back.rows[1].mean_g, 3.25);
  EXPECT_EQ(back.samples.size(), 4u);
  EXPECT_EQ(metrics_to_json(back), json);
  EXPECT_EQ(render_report(back.rows), render_report(rep.rows));
  EXPECT_NE(render_report(back.rows).find("Mean g"), std::string::npos);
}

TEST(Report, RowMeanIsArithmeticMeanOfSamples) {
  SeparationConfig c;
  c.blocks = {BlockSpec{2, 3, std::nullopt}};
  const auto r = records({1, 2, 3, 4, 5}, {0.1, 0.2, 0.3, 0.4, 0.7}, {1, 2, 3, 4, 4});
  const MetricsRow m = make_metrics_row("x", c, 1, 32000, r, true);
  EXPECT_NEAR(m.sisdri, (0.1 + 0.2 + 0.3 + 0.4 + 0.7) / 5, 1e-9);
  EXPECT_NEAR(*m.mean_g, 14.0 / 5, 1e-12);
  EXPECT_EQ(m.params, count_params(c).total() + gate_param_count(128, c.latent_length(32000)));
  EXPECT_EQ(m.iterations, (std::vector<std::size_t>{3}));
}

TEST(RunEval, PassthroughScoresZeroAndMissingCheckpointFails) {
  ExperimentConfig c;
  c.dataset.spec.duration = 0.125;
  c.dataset.val_size = 8;
  const auto dir = std::filesystem::temp_directory_path() / "latref_eval_test";
  std::filesystem::remove_all(dir);
  RunOptions opt;
  opt.out_dir = dir;
  opt.passthrough = true;
  run_eval(c, opt);
  const MetricsReport rep = metrics_from_json([&] {
    std::ifstream in(dir / "metrics.json");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }());
  EXPECT_EQ(rep.rows.at(0).sisdri, 0.0);
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.txt"));
  opt.passthrough = false;
  EXPECT_THROW(run_eval(c, opt), Error);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace latref
