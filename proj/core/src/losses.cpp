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


#include "latref/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace latref {

namespace {

constexpr double kDbPerNeper = 10.0 / std::numbers::ln10;

void check_pair(std::size_t est_size, std::size_t ref_size) {
  if (est_size != ref_size) {
    throw Error("si_sdr: length mismatch " + std::to_string(est_size) + " vs " +
                std::to_string(ref_size));
  }
  if (ref_size == 0) throw Error("si_sdr: zero-length signal");
}

double power(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

std::vector<double> centered(std::span<const double> x) {
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  std::vector<double> out(x.begin(), x.end());
  for (auto& v : out) v -= m;
  return out;
}

Var center(Var x) {
  const Tensor& xv = x.value();
  double m = 0.0;
  for (double v : xv.data()) m += v;
  m /= static_cast<double>(xv.size());
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] - m;
  const auto xi = x.id();
  return x.tape().record("center", std::move(y), {x}, [xi](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    double gm = 0.0;
    for (double v : g.data()) gm += v;
    gm /= static_cast<double>(g.size());
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] - gm;
  });
}

std::size_t row_length(const Tensor& t) { return t.rank() == 2 ? t.dim(1) : t.size(); }

std::span<const double> row_span(const Tensor& t, std::size_t r) {
  const std::size_t n = row_length(t);
  return t.data().subspan(r * n, n);
}

void check_matrix_pair(const Tensor& ests, const Tensor& refs, std::size_t speech_count) {
  if (ests.rank() != 2 || ests.shape() != refs.shape()) {
    throw Error("pit_loss: shape mismatch " + shape_to_string(ests.shape()) + " vs " +
                shape_to_string(refs.shape()));
  }
  if (speech_count > refs.dim(0)) {
    throw Error("pit_loss: speech_count " + std::to_string(speech_count) + " exceeds " +
                std::to_string(refs.dim(0)) + " sources");
  }
}

// Calls f on every permutation of [0, speech_count) extended by identity,
// in lexicographic order.
template <typename F>
void for_each_permutation(std::size_t sources, std::size_t speech_count, F&& f) {
  std::vector<std::size_t> perm(sources);
  std::iota(perm.begin(), perm.end(), 0);
  do {
    f(perm);
  } while (std::next_permutation(perm.begin(),
                                 perm.begin() + static_cast<std::ptrdiff_t>(speech_count)));
}

}  // namespace

SiSdrResult si_sdr(std::span<const double> est, std::span<const double> ref,
                   const SiSdrOptions& opt) {
  check_pair(est.size(), ref.size());
  std::vector<double> ec, rc;
  if (opt.zero_mean) {
    ec = centered(est);
    rc = centered(ref);
    est = ec;
    ref = rc;
  }
  const double rr = power(ref);
  if (rr == 0.0) throw Error("si_sdr: zero reference");
  double er = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) er += est[i] * ref[i];
  const double rho = er / rr;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double target = ref[i] * rho;
    const double err = target - est[i];
    num += target * target;
    den += err * err;
  }
  const double db = (std::log(num + opt.eps) - std::log(den + opt.eps)) * kDbPerNeper;
  return {std::min(opt.clamp_db, std::max(-opt.clamp_db, db)), rho};
}

Var si_sdr(Var est, std::span<const double> ref, const SiSdrOptions& opt) {
  check_pair(est.value().size(), ref.size());
  Tape& tape = est.tape();
  Tensor rt(Shape{ref.size()}, std::vector<double>(ref.begin(), ref.end()));
  Var e = est.shape().size() == 1 ? est : reshape(est, Shape{ref.size()});
  if (opt.zero_mean) {
    e = center(e);
    rt = Tensor(Shape{ref.size()}, centered(ref));
  }
  const double rr = power(rt.data());
  if (rr == 0.0) throw Error("si_sdr: zero reference");
  Var r = tape.constant(rt);
  Var rho = div(dot(e, r), tape.constant(Tensor::scalar(rr)));
  Var target = mul_scalar(r, rho);
  Var num = sum_squares(target);
  Var den = sum_squares(target - e);
  Var db = scale(log(add_scalar(num, opt.eps)) - log(add_scalar(den, opt.eps)), kDbPerNeper);
  return clamp(db, -opt.clamp_db, opt.clamp_db);
}

Var neg_sisdr_loss(Var ests, const Tensor& refs, const SiSdrOptions& opt) {
  if (ests.shape() != refs.shape() || refs.rank() != 2) {
    throw Error("neg_sisdr_loss: shape mismatch " + shape_to_string(ests.shape()) + " vs " +
                shape_to_string(refs.shape()));
  }
  // With no speech rows PIT reduces to the identity assignment.
  return pit_loss(ests, refs, 0, opt).loss;
}

double assignment_loss(const Tensor& ests, const Tensor& refs,
                       std::span<const std::size_t> permutation, const SiSdrOptions& opt) {
  double total = 0.0;
  for (std::size_t j = 0; j < permutation.size(); ++j) {
    total += si_sdr(row_span(ests, permutation[j]), row_span(refs, j), opt).value_db;
  }
  return total * (-1.0 / static_cast<double>(permutation.size()));
}

PitResult pit_loss(const Tensor& ests, const Tensor& refs, std::size_t speech_count,
                   const SiSdrOptions& opt) {
  check_matrix_pair(ests, refs, speech_count);
  PitResult best{std::numeric_limits<double>::infinity(), {}};
  for_each_permutation(refs.dim(0), speech_count, [&](const std::vector<std::size_t>& perm) {
    const double loss = assignment_loss(ests, refs, perm, opt);
    if (loss < best.loss) best = {loss, perm};
  });
  return best;
}

PitVar pit_loss(Var ests, const Tensor& refs, std::size_t speech_count, const SiSdrOptions& opt) {
  check_matrix_pair(ests.value(), refs, speech_count);
  PitResult chosen = pit_loss(ests.value(), refs, speech_count, opt);
  const std::size_t s = refs.dim(0);
  Var total;
  for (std::size_t j = 0; j < s; ++j) {
    Var v = si_sdr(row(ests, chosen.permutation[j]), row_span(refs, j), opt);
    total = total.valid() ? total + v : v;
  }
  return {scale(total, -1.0 / static_cast<double>(s)), chosen.permutation};
}

double si_sdr_improvement(std::span<const double> est, std::span<const double> ref,
                          std::span<const double> mix, const SiSdrOptions& opt) {
  return si_sdr(est, ref, opt).value_db - si_sdr(mix, ref, opt).value_db;
}

double mean_speech_sisdri(const Tensor& ests, const Tensor& refs, std::span<const double> mix,
                          std::size_t speech_count, const SiSdrOptions& opt) {
  if (speech_count == 0) throw Error("mean_speech_sisdri: no speech sources");
  const PitResult pit = pit_loss(ests, refs, speech_count, opt);
  double total = 0.0;
  for (std::size_t j = 0; j < speech_count; ++j) {
    total += si_sdr_improvement(row_span(ests, pit.permutation[j]), row_span(refs, j), mix, opt);
  }
  return total / static_cast<double>(speech_count);
}

}  // namespace latref
