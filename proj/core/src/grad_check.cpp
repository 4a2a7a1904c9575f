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

#include "latref/grad_check.hpp"

#include <cmath>

namespace latref {

namespace {

double evaluate(const ScalarFn& f) {
  Tape tape;
  Var out = f(tape);
  return out.value().item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<const ParamPtr> params, double eps) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");
  Tape tape;
  Var loss = f(tape);
  if (loss.value().size() != 1) {
    throw Error("grad_check: function must return a scalar, got " + shape_to_string(loss.shape()));
  }
  const Gradients grads = tape.backward(loss);

  GradCheckResult result;
  for (const ParamPtr& p : params) {
    const Tensor* g = grads.find(p.get());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double analytic = g ? (*g)[i] : 0.0;
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double plus = evaluate(f);
      p->value[i] = saved - eps;
      const double minus = evaluate(f);
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
        throw Error("grad_check: non-finite gradient for " + p->name + "[" + std::to_string(i) +
                    "] (analytic " + std::to_string(analytic) + ", numeric " +
                    std::to_string(numeric) + ")");
      }
      const double err =
          std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      ++result.entries_checked;
      if (err > result.max_relative_error || result.entries_checked == 1) {
        result.max_relative_error = err;
        result.worst_param = p->name;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace latref
