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


#include <cmath>

#include "latref/experiment.hpp"
#include "latref/grad_check.hpp"
#include "latref/losses.hpp"

namespace latref {

namespace {

// Draws values whose magnitude stays at least `gap` away from zero, so
// piecewise ops are not probed across their kinks.
ParamPtr random_param(const std::string& name, Shape shape, Rng& rng, double gap = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    const double u = rng.uniform(-1.0, 1.0);
    v = u >= 0.0 ? gap + u : -gap + u;
  }
  return make_param(name, std::move(t));
}

ParamPtr positive_param(const std::string& name, Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(0.5, 2.0);
  return make_param(name, std::move(t));
}

// Contracts an op output with fixed random weights to get a scalar.
Var project(Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w(y.shape());
  for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return dot(y, y.tape().constant(w));
}

}  // namespace

GradCheckSummary run_gradcheck_suite(std::uint64_t seed) {
  GradCheckSummary summary;
  Rng rng(seed);
  auto check = [&](const std::string& name, const std::vector<ParamPtr>& params,
                   const std::function<Var(Tape&, const std::vector<Var>&)>& body) {
    const std::uint64_t proj_seed = rng.next_u64();
    const ScalarFn f = [&](Tape& t) {
      std::vector<Var> vars;
      for (const auto& p : params) vars.push_back(t.param(p));
      Var out = body(t, vars);
      return out.value().size() == 1 ? out : project(out, proj_seed);
    };
    const GradCheckResult r = grad_check(f, params);
    summary.cases.emplace_back(name, r.max_relative_error);
    summary.max_error = std::max(summary.max_error, r.max_relative_error);
  };

  const auto a = random_param("a", {4, 7}, rng);
  const auto b = random_param("b", {4, 7}, rng);
  const auto pos = positive_param("p", {4, 7}, rng);
  const auto s1 = random_param("s", {1}, rng, 0.2);
  const auto kinked = random_param("x", {4, 7}, rng, 0.1);

  check("add", {a, b}, [](Tape&, const auto& v) { return v[0] + v[1]; });
  check("sub", {a, b}, [](Tape&, const auto& v) { return v[0] - v[1]; });
  check("mul", {a, b}, [](Tape&, const auto& v) { return v[0] * v[1]; });
  check("div", {a, pos}, [](Tape&, const auto& v) { return div(v[0], v[1]); });
  check("scale", {a}, [](Tape&, const auto& v) { return scale(v[0], -1.7); });
  check("add_scalar", {a}, [](Tape&, const auto& v) { return add_scalar(v[0], 0.3); });
  check("mul_scalar", {a, s1}, [](Tape&, const auto& v) { return mul_scalar(v[0], v[1]); });
  check("log", {pos}, [](Tape&, const auto& v) { return log(v[0]); });
  check("relu", {kinked}, [](Tape&, const auto& v) { return relu(v[0]); });
  const auto slope = random_param("slope", {4}, rng);
  check("prelu", {kinked, slope}, [](Tape&, const auto& v) { return prelu(v[0], v[1]); });
  check("prelu_shared", {kinked, s1}, [](Tape&, const auto& v) { return prelu(v[0], v[1]); });
  check("softmax_axis0", {a}, [](Tape&, const auto& v) { return softmax(v[0], 0); });
  check("softmax_axis1", {a}, [](Tape&, const auto& v) { return softmax(v[0], 1); });
  const auto gamma = random_param("gamma", {4}, rng);
  const auto beta = random_param("beta", {4}, rng);
  check("global_layer_norm", {a, gamma, beta},
        [](Tape&, const auto& v) { return global_layer_norm(v[0], v[1], v[2]); });
  check("sum", {a}, [](Tape&, const auto& v) { return sum(v[0]) * sum(v[0]); });
  check("mean", {a}, [](Tape&, const auto& v) { return mean(v[0]) * mean(v[0]); });
  check("dot", {a, b}, [](Tape&, const auto& v) { return dot(v[0], v[1]); });
  check("sum_squares", {a}, [](Tape&, const auto& v) { return sum_squares(v[0]); });
  check("clamp", {kinked}, [](Tape&, const auto& v) { return clamp(v[0], -0.95, 0.95); });

  const auto x = random_param("x", {3, 29}, rng);
  for (std::size_t stride : {1, 2, 3}) {
    const auto w = random_param("w", {5, 3, 4}, rng);
    const auto bias = random_param("bias", {5}, rng);
    check("conv1d_same_s" + std::to_string(stride), {x, w, bias}, [stride](Tape&, const auto& v) {
      return conv1d(v[0], v[1], v[2], ConvOptions{.stride = stride});
    });
    check("conv1d_valid_s" + std::to_string(stride), {x, w, bias},
          [stride](Tape&, const auto& v) {
            return conv1d(v[0], v[1], v[2],
                          ConvOptions{.stride = stride, .padding = Padding::kValid});
          });
  }
  const auto xg = random_param("x", {4, 17}, rng);
  const auto wg = random_param("w", {4, 1, 5}, rng);
  check("conv1d_depthwise", {xg, wg}, [](Tape&, const auto& v) {
    return conv1d(v[0], v[1], Var{}, ConvOptions{.stride = 2, .groups = 4});
  });
  const auto lat = random_param("v", {3, 11}, rng);
  for (std::size_t stride : {1, 2, 4}) {
    const auto w = random_param("w", {3, 2, 5}, rng);
    const auto bias = random_param("bias", {2}, rng);
    check("transposed_conv1d_same_s" + std::to_string(stride), {lat, w, bias},
          [stride](Tape&, const auto& v) {
            return transposed_conv1d(v[0], v[1], v[2], ConvOptions{.stride = stride});
          });
    check("transposed_conv1d_valid_s" + std::to_string(stride), {lat, w, bias},
          [stride](Tape&, const auto& v) {
            return transposed_conv1d(v[0], v[1], v[2],
                                     ConvOptions{.stride = stride, .padding = Padding::kValid});
          });
  }
  check("upsample_nearest", {lat}, [](Tape&, const auto& v) { return upsample_nearest(v[0], 23); });
  check("rows", {a}, [](Tape&, const auto& v) { return rows(v[0], 1, 2); });
  check("row", {a}, [](Tape&, const auto& v) { return row(v[0], 3); });
  check("stack_rows", {a, b}, [](Tape&, const auto& v) {
    const std::vector<Var> parts{rows(v[0], 0, 2), v[1]};
    return stack_rows(parts);
  });
  check("reshape", {a}, [](Tape&, const auto& v) { return reshape(v[0], Shape{7, 4}); });
  check("crop", {a}, [](Tape&, const auto& v) { return crop(v[0], 5); });
  check("element", {a}, [](Tape&, const auto& v) { return element(v[0], 9) * element(v[0], 2); });
  const auto gate = make_param("gate", Tensor::scalar(0.37));
  check("gate_mix", {a, b, gate}, [](Tape&, const auto& v) { return gate_mix(v[0], v[1], v[2]); });

  // Loss path on its own.
  const auto est = random_param("est", {2, 48}, rng);
  Tensor refs({2, 48});
  for (auto& v : refs.data()) v = rng.normal();
  check("neg_sisdr_loss", {est}, [&refs](Tape&, const auto& v) {
    return neg_sisdr_loss(v[0], refs);
  });
  check("pit_loss", {est}, [&refs](Tape&, const auto& v) { return pit_loss(v[0], refs, 2).loss; });

  // Whole pipeline: encoder, two sub-blocks, mask net, decoder, PIT loss.
  SeparationConfig c;
  c.enc_bases = 6;
  c.enc_kernel = 8;
  c.enc_stride = 4;
  c.latent_channels = 4;
  c.hidden_channels = 6;
  c.sub_block_kernel = 3;
  c.scales = 3;
  c.num_sources = 3;
  c.blocks = {BlockSpec{2, 2, std::nullopt}};
  ModelParams model = make_model(c, rng.next_u64());
  Rng init(rng.next_u64());
  randomize(model, init);
  Tensor mixture({1, 256});
  Tensor sources({3, 256});
  for (auto& v : sources.data()) v = rng.normal();
  for (std::size_t t = 0; t < 256; ++t) {
    mixture[t] = sources[t] + sources[256 + t] + sources[512 + t];
  }
  const auto params = model.parameters();
  const ScalarFn full = [&](Tape& t) {
    return pit_loss(forward(model, t.constant(mixture), 0), sources, 2).loss;
  };
  const GradCheckResult r = grad_check(full, params);
  summary.cases.emplace_back("model_pipeline", r.max_relative_error);
  summary.max_error = std::max(summary.max_error, r.max_relative_error);
  return summary;
}

}  // namespace latref
