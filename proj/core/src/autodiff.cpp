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

#include "latref/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

namespace latref {

namespace {

using Id = std::uint32_t;

void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw Error(std::string(op) + ": operands are not on the same tape");
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require_same_tape(a, b, op);
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                shape_to_string(b.shape()));
  }
}

void require_single(const Var& s, const char* op) {
  if (s.value().size() != 1) {
    throw Error(std::string(op) + ": expected a single-element tensor, got " +
                shape_to_string(s.shape()));
  }
}

// Elementwise unary op helper: fwd computes y from x, dfn maps (x, y, g) to dx.
template <typename Fwd, typename Dfn>
Var unary(const char* op, Var x, Fwd fwd, Dfn dfn) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  const Id xi = x.id();
  return x.tape().record(op, std::move(y), {x}, [xi, dfn](Tape& t, Id self) {
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dfn(xv[i], yv[i], g[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Gradients

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor* Gradients::find(const Parameter* p) const {
  auto it = index_.find(p);
  return it == index_.end() ? nullptr : &entries_[it->second].second;
}

void Gradients::accumulate(const ParamPtr& p, const Tensor& g) {
  auto it = index_.find(p.get());
  if (it == index_.end()) {
    index_.emplace(p.get(), entries_.size());
    entries_.emplace_back(p, g);
    return;
  }
  Tensor& dst = entries_[it->second].second;
  if (dst.shape() != g.shape()) {
    throw Error("gradient shape mismatch for " + p->name);
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void Gradients::add(const Gradients& other) {
  for (const auto& [p, g] : other.entries_) accumulate(p, g);
}

void Gradients::scale(double s) {
  for (auto& [p, g] : entries_) {
    for (auto& v : g.data()) v *= s;
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<Id>::max()) throw Error("tape overflow");
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<Id>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(const ParamPtr& p) {
  if (!p) throw Error("null parameter bound to tape");
  if (auto it = param_index_.find(p.get()); it != param_index_.end()) {
    return Var(this, it->second);
  }
  Node n;
  n.op = "param";
  n.value = p->value;
  n.is_param = true;
  n.requires_grad = !is_frozen(p.get());
  Var v = push(std::move(n));
  param_index_.emplace(p.get(), v.id());
  param_nodes_.emplace_back(v.id(), p);
  return v;
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn fn) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw Error(std::string(op) + ": input recorded on another tape");
    n.inputs.push_back(in.id());
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Tensor& Tape::grad(Id id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

Tensor Tape::grad_of(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == n.value.size() && n.grad.shape() == n.value.shape()) return n.grad;
  return Tensor(n.value.shape());
}

Gradients Tape::backward(Var loss) {
  if (&loss.tape() != this) throw Error("backward: loss recorded on another tape");
  if (loss.value().size() != 1) {
    throw Error("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (nodes_[loss.id()].requires_grad) {
    grad(loss.id()).fill(1.0);
    for (std::int64_t id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.backward || n.grad.size() != n.value.size()) continue;
      n.backward(*this, static_cast<Id>(id));
    }
  }
  Gradients out;
  for (const auto& [id, p] : param_nodes_) {
    if (!nodes_[id].requires_grad) continue;
    out.accumulate(p, grad_of(Var(this, id)));
  }
  return out;
}

std::size_t Tape::retained_activation_bytes() const {
  std::vector<bool> counted(nodes_.size(), false);
  std::size_t elems = 0;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    if (!n.is_param && !counted[id]) {
      counted[id] = true;
      elems += n.value.size();
    }
    for (Id in : n.inputs) {
      const Node& src = nodes_[in];
      if (src.requires_grad || src.is_param || counted[in]) continue;
      counted[in] = true;
      elems += src.value.size();
    }
  }
  return elems * sizeof(double);
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  const Id ai = a.id(), bi = b.id();
  return a.tape().record("add", std::move(y), {a, b}, [ai, bi](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    for (Id in : {ai, bi}) {
      if (!t.requires_grad(in)) continue;
      Tensor& gi = t.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  const Id ai = a.id(), bi = b.id();
  return a.tape().record("sub", std::move(y), {a, b}, [ai, bi](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  const Id ai = a.id(), bi = b.id();
  return a.tape().record("mul", std::move(y), {a, b}, [ai, bi](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(
      "scale", a, [s](double x) { return x * s; },
      [s](double, double, double g) { return g * s; });
}

Var add_scalar(Var a, double c) {
  return unary(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double, double g) { return g; });
}

Var mul_scalar(Var a, Var s) {
  require_same_tape(a, s, "mul_scalar");
  require_single(s, "mul_scalar");
  const Tensor& av = a.value();
  const double sv = s.value()[0];
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * sv;
  const Id ai = a.id(), si = s.id();
  return a.tape().record("mul_scalar", std::move(y), {a, s}, [ai, si](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const double sv = t.value(si)[0];
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
    }
    if (t.requires_grad(si)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad(si)[0] += acc;
    }
  });
}

Var div(Var a, Var b) {
  require_same_shape(a, b, "div");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] / bv[i];
  const Id ai = a.id(), bi = b.id();
  return a.tape().record("div", std::move(y), {a, b}, [ai, bi](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& bv = t.value(bi);
    const Tensor& yv = t.value(self);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * yv[i] / bv[i];
    }
  });
}

Var log(Var a) {
  return unary(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double, double g) { return g / x; });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Var prelu(Var x, Var slope) {
  require_same_tape(x, slope, "prelu");
  const Tensor& xv = x.value();
  const std::size_t channels = xv.rank() >= 2 ? xv.dim(0) : 1;
  const std::size_t ns = slope.value().size();
  if (ns != 1 && ns != channels) {
    throw Error("prelu: slope " + shape_to_string(slope.shape()) + " does not match input " +
                shape_to_string(xv.shape()));
  }
  const std::size_t inner = channels ? xv.size() / channels : 0;
  const Tensor& sv = slope.value();
  Tensor y(xv.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    const double a = sv[ns == 1 ? 0 : c];
    for (std::size_t i = c * inner; i < (c + 1) * inner; ++i) {
      y[i] = xv[i] > 0.0 ? xv[i] : a * xv[i];
    }
  }
  const Id xi = x.id(), si = slope.id();
  return x.tape().record(
      "prelu", std::move(y), {x, slope}, [xi, si, channels, inner, ns](Tape& t, Id self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(xi);
        const Tensor& sv = t.value(si);
        double* gx = t.requires_grad(xi) ? t.grad(xi).data().data() : nullptr;
        double* gs = t.requires_grad(si) ? t.grad(si).data().data() : nullptr;
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t sc = ns == 1 ? 0 : c;
          const double a = sv[sc];
          double acc = 0.0;
          for (std::size_t i = c * inner; i < (c + 1) * inner; ++i) {
            if (xv[i] > 0.0) {
              if (gx) gx[i] += g[i];
            } else {
              if (gx) gx[i] += g[i] * a;
              acc += g[i] * xv[i];
            }
          }
          if (gs) gs[sc] += acc;
        }
      });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw Error("softmax: axis " + std::to_string(axis) + " out of range for " +
                shape_to_string(xv.shape()));
  }
  const std::size_t n = xv.dim(axis);
  if (n == 0) throw Error("softmax: empty axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= xv.dim(d);
  for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.dim(d);
  Tensor y(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        y[base + j * inner] = std::exp(xv[base + j * inner] - mx);
        z += y[base + j * inner];
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  }
  const Id xi = x.id();
  return x.tape().record("softmax", std::move(y), {x}, [xi, outer, inner, n](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[base + j * inner] * yv[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          gx[k] += yv[k] * (g[k] - s);
        }
      }
    }
  });
}

Var global_layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma, "global_layer_norm");
  const bool shifted = beta.valid();
  if (shifted) require_same_tape(x, beta, "global_layer_norm");
  const Tensor& xv = x.value();
  if (xv.rank() != 2) {
    throw Error("global_layer_norm: expected C x L input, got " + shape_to_string(xv.shape()));
  }
  const std::size_t channels = xv.dim(0), length = xv.dim(1);
  if (gamma.value().size() != channels || (shifted && beta.value().size() != channels)) {
    throw Error("global_layer_norm: scale/shift " + shape_to_string(gamma.shape()) + "/" +
                (shifted ? shape_to_string(beta.shape()) : std::string("none")) +
                " do not match input " + shape_to_string(xv.shape()));
  }
  if (length == 0) throw Error("global_layer_norm: empty time axis");
  std::vector<double> mu(channels), inv(channels);
  Tensor y(xv.shape());
  const Tensor& gv = gamma.value();
  for (std::size_t c = 0; c < channels; ++c) {
    const double shift = shifted ? beta.value()[c] : 0.0;
    const double* row = &xv.data()[c * length];
    double m = 0.0;
    for (std::size_t i = 0; i < length; ++i) m += row[i];
    m /= static_cast<double>(length);
    double var = 0.0;
    for (std::size_t i = 0; i < length; ++i) var += (row[i] - m) * (row[i] - m);
    var /= static_cast<double>(length);
    mu[c] = m;
    inv[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < length; ++i) {
      y[c * length + i] = gv[c] * (row[i] - m) * inv[c] + shift;
    }
  }
  const Id xi = x.id(), gi = gamma.id(), bi = beta.id();
  std::vector<Var> inputs{x, gamma};
  if (shifted) inputs.push_back(beta);
  return x.tape().record(
      "global_layer_norm", std::move(y), inputs,
      [xi, gi, bi, shifted, channels, length, mu = std::move(mu),
       inv = std::move(inv)](Tape& t, Id self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(xi);
        const Tensor& gv = t.value(gi);
        const double n = static_cast<double>(length);
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t off = c * length;
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < length; ++i) {
            const double xh = (xv[off + i] - mu[c]) * inv[c];
            sum_g += g[off + i];
            sum_gx += g[off + i] * xh;
          }
          if (t.requires_grad(gi)) t.grad(gi)[c] += sum_gx;
          if (shifted && t.requires_grad(bi)) t.grad(bi)[c] += sum_g;
          if (t.requires_grad(xi)) {
            Tensor& gx = t.grad(xi);
            const double m1 = sum_g * gv[c] / n;
            const double m2 = sum_gx * gv[c] / n;
            for (std::size_t i = 0; i < length; ++i) {
              const double xh = (xv[off + i] - mu[c]) * inv[c];
              gx[off + i] += inv[c] * (g[off + i] * gv[c] - m1 - xh * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v;
  const Id xi = x.id();
  return x.tape().record("sum", Tensor::scalar(s), {x}, [xi](Tape& t, Id self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(xi).data()) v += g;
  });
}

Var mean(Var x) {
  const Tensor& xv = x.value();
  if (xv.empty()) throw Error("mean: empty tensor");
  double s = 0.0;
  for (double v : xv.data()) s += v;
  const double n = static_cast<double>(xv.size());
  const Id xi = x.id();
  return x.tape().record("mean", Tensor::scalar(s / n), {x}, [xi, n](Tape& t, Id self) {
    const double g = t.grad(self)[0] / n;
    for (auto& v : t.grad(xi).data()) v += g;
  });
}

Var dot(Var a, Var b) {
  require_same_tape(a, b, "dot");
  if (a.value().size() != b.value().size()) {
    throw Error("dot: size mismatch " + shape_to_string(a.shape()) + " vs " +
                shape_to_string(b.shape()));
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  const Id ai = a.id(), bi = b.id();
  return a.tape().record("dot", Tensor::scalar(s), {a, b}, [ai, bi](Tape& t, Id self) {
    const double g = t.grad(self)[0];
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * av[i];
    }
  });
}

Var sum_squares(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v * v;
  const Id xi = x.id();
  return x.tape().record("sum_squares", Tensor::scalar(s), {x}, [xi](Tape& t, Id self) {
    const double g = t.grad(self)[0];
    const Tensor& xv = t.value(xi);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * g * xv[i];
  });
}

Var clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw Error("clamp: lo > hi");
  return unary(
      "clamp", x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double, double g) { return (v > lo && v < hi) ? g : 0.0; });
}

// ---------------------------------------------------------------------------
// Convolutions

ConvGeometry conv1d_geometry(std::size_t length, std::size_t kernel, const ConvOptions& opt) {
  if (kernel == 0) throw Error("conv1d: kernel size must be >= 1");
  if (opt.stride == 0) throw Error("conv1d: stride must be >= 1");
  if (opt.padding == Padding::kValid) {
    if (length < kernel) {
      throw Error("conv1d: input length " + std::to_string(length) +
                  " shorter than kernel " + std::to_string(kernel) + " in valid mode");
    }
    return {(length - kernel) / opt.stride + 1, 0};
  }
  const std::size_t out = (length + opt.stride - 1) / opt.stride;
  const std::size_t span = out == 0 ? 0 : (out - 1) * opt.stride + kernel;
  const std::size_t pad = span > length ? span - length : 0;
  return {out, pad / 2};
}

Var conv1d(Var x, Var w, Var b, const ConvOptions& opt) {
  require_same_tape(x, w, "conv1d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 3) {
    throw Error("conv1d: expected x Cin x T and w Cout x Cin x K, got x " +
                shape_to_string(xv.shape()) + " and w " + shape_to_string(wv.shape()));
  }
  const std::size_t groups = opt.groups;
  const std::size_t cin = xv.dim(0), length = xv.dim(1);
  const std::size_t cout = wv.dim(0), cin_g = wv.dim(1), kernel = wv.dim(2);
  if (groups == 0 || cin_g * groups != cin || cout % groups != 0) {
    throw Error("conv1d: channel mismatch between x " + shape_to_string(xv.shape()) +
                " and w " + shape_to_string(wv.shape()) + " (groups " +
                std::to_string(groups) + ")");
  }
  const bool has_bias = b.valid();
  if (has_bias) {
    require_same_tape(x, b, "conv1d");
    if (b.value().size() != cout) {
      throw Error("conv1d: bias " + shape_to_string(b.shape()) + " does not match w " +
                  shape_to_string(wv.shape()));
    }
  }
  const auto geo = conv1d_geometry(length, kernel, opt);
  const std::size_t out_len = geo.out_length, stride = opt.stride;
  const auto left = static_cast<std::ptrdiff_t>(geo.pad_left);
  const std::size_t cout_g = cout / groups;

  // Valid output range [t0, t1) for kernel tap k.
  auto tap_range = [=](std::size_t k) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - left;
    const auto s = static_cast<std::ptrdiff_t>(stride);
    std::ptrdiff_t t0 = off >= 0 ? 0 : (-off + s - 1) / s;
    std::ptrdiff_t t1 = static_cast<std::ptrdiff_t>(length) - 1 - off;
    t1 = t1 < 0 ? 0 : t1 / s + 1;
    t1 = std::min<std::ptrdiff_t>(t1, static_cast<std::ptrdiff_t>(out_len));
    if (t0 > t1) t0 = t1;
    return std::pair<std::ptrdiff_t, std::ptrdiff_t>{t0, t1};
  };

  Tensor y(Shape{cout, out_len});
  const double* xd = xv.data().data();
  const double* wd = wv.data().data();
  double* yd = y.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    const std::size_t g = o / cout_g;
    double* yrow = yd + o * out_len;
    if (has_bias) std::fill(yrow, yrow + out_len, b.value()[o]);
    for (std::size_t ci = 0; ci < cin_g; ++ci) {
      const double* xrow = xd + (g * cin_g + ci) * length;
      for (std::size_t k = 0; k < kernel; ++k) {
        const double wk = wd[(o * cin_g + ci) * kernel + k];
        const auto [t0, t1] = tap_range(k);
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - left;
        if (stride == 1) {
          for (std::ptrdiff_t t = t0; t < t1; ++t) yrow[t] += wk * xrow[t + off];
        } else {
          for (std::ptrdiff_t t = t0; t < t1; ++t) {
            yrow[t] += wk * xrow[t * static_cast<std::ptrdiff_t>(stride) + off];
          }
        }
      }
    }
  }

  const Id xi = x.id(), wi = w.id(), bi = has_bias ? b.id() : 0;
  auto fn = [=](Tape& t, Id self) {
    const Tensor& gy = t.grad(self);
    const double* gyd = gy.data().data();
    const double* xd = t.value(xi).data().data();
    const double* wd = t.value(wi).data().data();
    const bool need_x = t.requires_grad(xi);
    const bool need_w = t.requires_grad(wi);
    double* gxd = need_x ? t.grad(xi).data().data() : nullptr;
    double* gwd = need_w ? t.grad(wi).data().data() : nullptr;
    if (has_bias && t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < out_len; ++i) acc += gyd[o * out_len + i];
        gb[o] += acc;
      }
    }
    const auto s = static_cast<std::ptrdiff_t>(stride);
    for (std::size_t o = 0; o < cout; ++o) {
      const std::size_t g = o / cout_g;
      const double* grow = gyd + o * out_len;
      for (std::size_t ci = 0; ci < cin_g; ++ci) {
        const std::size_t c = g * cin_g + ci;
        const double* xrow = xd + c * length;
        for (std::size_t k = 0; k < kernel; ++k) {
          const std::size_t widx = (o * cin_g + ci) * kernel + k;
          const auto [t0, t1] = tap_range(k);
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - left;
          if (need_x) {
            const double wk = wd[widx];
            double* gxrow = gxd + c * length;
            for (std::ptrdiff_t tt = t0; tt < t1; ++tt) gxrow[tt * s + off] += wk * grow[tt];
          }
          if (need_w) {
            double acc = 0.0;
            for (std::ptrdiff_t tt = t0; tt < t1; ++tt) acc += grow[tt] * xrow[tt * s + off];
            gwd[widx] += acc;
          }
        }
      }
    }
  };
  if (has_bias) return x.tape().record("conv1d", std::move(y), {x, w, b}, fn);
  return x.tape().record("conv1d", std::move(y), {x, w}, fn);
}

Var transposed_conv1d(Var v, Var w, Var b, const ConvOptions& opt) {
  require_same_tape(v, w, "transposed_conv1d");
  const Tensor& vv = v.value();
  const Tensor& wv = w.value();
  if (vv.rank() != 2 || wv.rank() != 3) {
    throw Error("transposed_conv1d: expected v C x L and w C x Cout x K, got v " +
                shape_to_string(vv.shape()) + " and w " + shape_to_string(wv.shape()));
  }
  if (opt.groups != 1) throw Error("transposed_conv1d: groups are not supported");
  const std::size_t channels = vv.dim(0), in_len = vv.dim(1);
  if (wv.dim(0) != channels) {
    throw Error("transposed_conv1d: channel mismatch between v " + shape_to_string(vv.shape()) +
                " and w " + shape_to_string(wv.shape()));
  }
  const std::size_t cout = wv.dim(1), kernel = wv.dim(2), stride = opt.stride;
  if (kernel == 0 || stride == 0) throw Error("transposed_conv1d: kernel and stride must be >= 1");
  if (stride > kernel && !opt.allow_gaps) {
    throw Error("transposed_conv1d: stride " + std::to_string(stride) + " exceeds kernel " +
                std::to_string(kernel) + " and would leave gaps");
  }
  const bool has_bias = b.valid();
  if (has_bias) {
    require_same_tape(v, b, "transposed_conv1d");
    if (b.value().size() != cout) {
      throw Error("transposed_conv1d: bias " + shape_to_string(b.shape()) +
                  " does not match w " + shape_to_string(wv.shape()));
    }
  }
  std::size_t out_len = 0, left = 0;
  if (opt.padding == Padding::kValid) {
    out_len = in_len == 0 ? 0 : (in_len - 1) * stride + kernel;
  } else {
    out_len = in_len * stride;
    left = kernel > stride ? (kernel - stride) / 2 : 0;
  }
  const auto sl = static_cast<std::ptrdiff_t>(left);
  const auto ss = static_cast<std::ptrdiff_t>(stride);
  const auto n_out = static_cast<std::ptrdiff_t>(out_len);
  // Input frames l whose tap k lands inside the output: 0 <= l*s + k - left < T.
  auto frame_range = [=](std::size_t k) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - sl;
    std::ptrdiff_t l0 = off >= 0 ? 0 : (-off + ss - 1) / ss;
    std::ptrdiff_t l1 = n_out - 1 - off;
    l1 = l1 < 0 ? 0 : l1 / ss + 1;
    l1 = std::min<std::ptrdiff_t>(l1, static_cast<std::ptrdiff_t>(in_len));
    if (l0 > l1) l0 = l1;
    return std::pair<std::ptrdiff_t, std::ptrdiff_t>{l0, l1};
  };

  Tensor y(Shape{cout, out_len});
  const double* vd = vv.data().data();
  const double* wd = wv.data().data();
  double* yd = y.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    double* yrow = yd + o * out_len;
    if (has_bias) std::fill(yrow, yrow + out_len, b.value()[o]);
    for (std::size_t c = 0; c < channels; ++c) {
      const double* vrow = vd + c * in_len;
      for (std::size_t k = 0; k < kernel; ++k) {
        const double wk = wd[(c * cout + o) * kernel + k];
        const auto [l0, l1] = frame_range(k);
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - sl;
        for (std::ptrdiff_t l = l0; l < l1; ++l) yrow[l * ss + off] += wk * vrow[l];
      }
    }
  }

  const Id vi = v.id(), wi = w.id(), bi = has_bias ? b.id() : 0;
  auto fn = [=](Tape& t, Id self) {
    const double* gyd = t.grad(self).data().data();
    const double* vd = t.value(vi).data().data();
    const double* wd = t.value(wi).data().data();
    const bool need_v = t.requires_grad(vi);
    const bool need_w = t.requires_grad(wi);
    double* gvd = need_v ? t.grad(vi).data().data() : nullptr;
    double* gwd = need_w ? t.grad(wi).data().data() : nullptr;
    if (has_bias && t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < out_len; ++i) acc += gyd[o * out_len + i];
        gb[o] += acc;
      }
    }
    for (std::size_t o = 0; o < cout; ++o) {
      const double* grow = gyd + o * out_len;
      for (std::size_t c = 0; c < channels; ++c) {
        const double* vrow = vd + c * in_len;
        for (std::size_t k = 0; k < kernel; ++k) {
          const std::size_t widx = (c * cout + o) * kernel + k;
          const auto [l0, l1] = frame_range(k);
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - sl;
          if (need_v) {
            const double wk = wd[widx];
            double* gvrow = gvd + c * in_len;
            for (std::ptrdiff_t l = l0; l < l1; ++l) gvrow[l] += wk * grow[l * ss + off];
          }
          if (need_w) {
            double acc = 0.0;
            for (std::ptrdiff_t l = l0; l < l1; ++l) acc += grow[l * ss + off] * vrow[l];
            gwd[widx] += acc;
          }
        }
      }
    }
  };
  if (has_bias) return v.tape().record("transposed_conv1d", std::move(y), {v, w, b}, fn);
  return v.tape().record("transposed_conv1d", std::move(y), {v, w}, fn);
}

// ---------------------------------------------------------------------------
// Layout

Var upsample_nearest(Var x, std::size_t length) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw Error("upsample_nearest: expected C x L, got " + shape_to_string(xv.shape()));
  const std::size_t channels = xv.dim(0), in_len = xv.dim(1);
  if (in_len == 0 || length == 0) throw Error("upsample_nearest: empty time axis");
  std::vector<std::size_t> src(length);
  for (std::size_t j = 0; j < length; ++j) src[j] = j * in_len / length;
  Tensor y(Shape{channels, length});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t j = 0; j < length; ++j) y[c * length + j] = xv[c * in_len + src[j]];
  }
  const Id xi = x.id();
  return x.tape().record(
      "upsample_nearest", std::move(y), {x},
      [xi, channels, in_len, length, src = std::move(src)](Tape& t, Id self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(xi);
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t j = 0; j < length; ++j) gx[c * in_len + src[j]] += g[c * length + j];
        }
      });
}

Var rows(Var x, std::size_t begin, std::size_t count) {
  Tensor y = x.value().rows(begin, count);
  const std::size_t offset = x.value().rank() ? begin * (x.value().size() / x.value().dim(0)) : 0;
  const Id xi = x.id();
  return x.tape().record("rows", std::move(y), {x}, [xi, offset](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
  });
}

Var row(Var x, std::size_t i) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw Error("row: expected rank-2 input, got " + shape_to_string(xv.shape()));
  Tensor y = xv.rows(i, 1).reshaped(Shape{xv.dim(1)});
  const std::size_t offset = i * xv.dim(1);
  const Id xi = x.id();
  return x.tape().record("row", std::move(y), {x}, [xi, offset](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[offset + k] += g[k];
  });
}

Var stack_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error("stack_rows: no inputs");
  const Tensor& first = parts[0].value();
  const bool vectors = first.rank() == 1;
  const std::size_t width = vectors ? first.size() : first.size() / std::max<std::size_t>(1, first.dim(0));
  std::size_t total_rows = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p, "stack_rows");
    const Tensor& pv = p.value();
    const bool ok = vectors ? (pv.rank() == 1 && pv.size() == width)
                            : (pv.rank() == first.rank() &&
                               std::equal(pv.shape().begin() + 1, pv.shape().end(),
                                          first.shape().begin() + 1));
    if (!ok) {
      throw Error("stack_rows: incompatible part " + shape_to_string(pv.shape()) + " vs " +
                  shape_to_string(first.shape()));
    }
    offsets.push_back(total_rows * width);
    total_rows += vectors ? 1 : pv.dim(0);
  }
  Shape shape = vectors ? Shape{total_rows, width} : first.shape();
  if (!vectors) shape[0] = total_rows;
  Tensor y(shape);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    std::copy(pv.data().begin(), pv.data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(offsets[i]));
  }
  std::vector<Id> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      "stack_rows", std::move(y), parts,
      [ids = std::move(ids), offsets = std::move(offsets)](Tape& t, Id self) {
        const Tensor& g = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (!t.requires_grad(ids[i])) continue;
          Tensor& gp = t.grad(ids[i]);
          for (std::size_t k = 0; k < gp.size(); ++k) gp[k] += g[offsets[i] + k];
        }
      });
}

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  const Id xi = x.id();
  return x.tape().record("reshape", std::move(y), {x}, [xi](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var crop(Var x, std::size_t length) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw Error("crop: scalar input");
  const std::size_t last = xv.shape().back();
  if (length > last) {
    throw Error("crop: length " + std::to_string(length) + " exceeds last axis of " +
                shape_to_string(xv.shape()));
  }
  const std::size_t outer = last ? xv.size() / last : 0;
  Shape shape = xv.shape();
  shape.back() = length;
  Tensor y(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(o * last), length,
                y.data().begin() + static_cast<std::ptrdiff_t>(o * length));
  }
  const Id xi = x.id();
  return x.tape().record("crop", std::move(y), {x}, [xi, outer, last, length](Tape& t, Id self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < length; ++i) gx[o * last + i] += g[o * length + i];
    }
  });
}

Var element(Var x, std::size_t index) {
  const Tensor& xv = x.value();
  if (index >= xv.size()) {
    throw Error("element: index " + std::to_string(index) + " out of range for " +
                shape_to_string(xv.shape()));
  }
  const Id xi = x.id();
  return x.tape().record("element", Tensor::scalar(xv[index]), {x}, [xi, index](Tape& t, Id self) {
    t.grad(xi)[index] += t.grad(self)[0];
  });
}

// ---------------------------------------------------------------------------
// Gating primitives

Var straight_through(Var soft, double hard) {
  require_single(soft, "straight_through");
  const Id si = soft.id();
  return soft.tape().record("straight_through", Tensor::scalar(hard), {soft},
                            [si](Tape& t, Id self) { t.grad(si)[0] += t.grad(self)[0]; });
}

Var gate_mix(Var processed, Var skipped, Var gate) {
  require_same_shape(processed, skipped, "gate_mix");
  require_same_tape(processed, gate, "gate_mix");
  require_single(gate, "gate_mix");
  const double gv = gate.value()[0];
  Tensor y;
  if (gv == 1.0) {
    y = processed.value();
  } else if (gv == 0.0) {
    y = skipped.value();
  } else {
    const Tensor& pv = processed.value();
    const Tensor& sv = skipped.value();
    y = Tensor(pv.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pv[i] * gv + sv[i] * (1.0 - gv);
  }
  const Id pi = processed.id(), si = skipped.id(), gi = gate.id();
  return processed.tape().record(
      "gate_mix", std::move(y), {processed, skipped, gate}, [pi, si, gi](Tape& t, Id self) {
        const Tensor& g = t.grad(self);
        const double gv = t.value(gi)[0];
        if (t.requires_grad(pi)) {
          Tensor& gp = t.grad(pi);
          for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i] * gv;
        }
        if (t.requires_grad(si)) {
          Tensor& gs = t.grad(si);
          for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i] * (1.0 - gv);
        }
        if (t.requires_grad(gi)) {
          const Tensor& pv = t.value(pi);
          const Tensor& sv = t.value(si);
          double acc = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (pv[i] - sv[i]);
          t.grad(gi)[0] += acc;
        }
      });
}

}  // namespace latref
