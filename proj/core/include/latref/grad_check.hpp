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

#ifndef LATREF_GRAD_CHECK_HPP_
#define LATREF_GRAD_CHECK_HPP_

#include <functional>
#include <span>
#include <string>

#include "latref/autodiff.hpp"

namespace latref {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Builds a scalar on the supplied tape; must bind params via Tape::param.
using ScalarFn = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of `params`. The per-entry error is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// Throws Error when either gradient is non-finite.
GradCheckResult grad_check(const ScalarFn& f, std::span<const ParamPtr> params, double eps = 1e-5);

}  // namespace latref

#endif  // LATREF_GRAD_CHECK_HPP_
