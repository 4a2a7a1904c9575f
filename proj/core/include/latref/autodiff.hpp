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

// Reverse-mode differentiation over a linear tape.
//
// A Tape records every forward operation in evaluation order. Values are
// immutable once recorded; Var is a lightweight handle (tape, node id).
// Parameters enter the tape through Tape::param, which binds the node to the
// shared Parameter so backward() can report per-parameter gradients. Frozen
// parameters enter as constants: no node downstream of only frozen or
// constant inputs requires a gradient, and backward skips those nodes.

#ifndef LATREF_AUTODIFF_HPP_
#define LATREF_AUTODIFF_HPP_

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "latref/tensor.hpp"

namespace latref {

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Per-parameter gradients in first-use order.
class Gradients {
 public:
  const Tensor* find(const Parameter* p) const;
  /// Adds `g` into the entry of `p`, creating it when absent.
  void accumulate(const ParamPtr& p, const Tensor& g);
  void add(const Gradients& other);
  void scale(double s);

  std::vector<std::pair<ParamPtr, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<ParamPtr, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::pair<ParamPtr, Tensor>> entries_;
  std::unordered_map<const Parameter*, std::size_t> index_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// A leaf that requires a gradient but is not bound to a Parameter.
  Var input(Tensor value);
  /// Binds a parameter. Repeated calls with the same parameter return the
  /// same node so aliased weights accumulate into one gradient.
  Var param(const ParamPtr& p);

  void freeze(const Parameter* p) { frozen_.insert(p); }
  bool is_frozen(const Parameter* p) const { return frozen_.contains(p); }

  /// Records an op output. The node requires a gradient iff any input does;
  /// `fn` is only kept in that case.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn);

  /// Runs reverse accumulation from a single-element loss. Every bound,
  /// non-frozen parameter gets an entry; unreachable ones get zeros.
  Gradients backward(Var loss);

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(std::uint32_t id);
  /// Gradient w.r.t. a node after backward(); zeros when never reached.
  Tensor grad_of(Var v) const;

  std::size_t num_nodes() const { return nodes_.size(); }
  std::string_view op_name(std::uint32_t id) const { return nodes_[id].op; }

  /// Bytes of non-parameter values that backward() needs: every recorded
  /// value that requires a gradient, plus each constant consumed directly
  /// by such a node.
  std::size_t retained_activation_bytes() const;

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_param = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
  };

  Var push(Node node);

  // A deque so that references returned by value() survive later ops.
  std::deque<Node> nodes_;
  std::vector<std::pair<std::uint32_t, ParamPtr>> param_nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_index_;
  std::unordered_set<const Parameter*> frozen_;
};

// ---------------------------------------------------------------------------
// Operations. All inputs must live on the same tape.

enum class Padding {
  kSame,   // symmetric zero pad, output length ceil(T / stride)
  kValid,  // no padding, output length (T - K) / stride + 1
};

struct ConvOptions {
  std::size_t stride = 1;
  Padding padding = Padding::kSame;
  std::size_t groups = 1;
  // transposed_conv1d only: permit stride > K, which leaves gaps.
  bool allow_gaps = false;
};

/// Output length and left pad of conv1d for an input of length `length`.
struct ConvGeometry {
  std::size_t out_length;
  std::size_t pad_left;
};
ConvGeometry conv1d_geometry(std::size_t length, std::size_t kernel, const ConvOptions& opt);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
/// a * s for a single-element s.
Var mul_scalar(Var a, Var s);
Var log(Var a);

Var relu(Var x);
/// max(0,x) + slope * min(0,x). slope has one entry per leading-axis
/// channel, or a single entry shared by all.
Var prelu(Var x, Var slope);
Var softmax(Var x, std::size_t axis);
/// Per-channel normalization over time for x of shape C x L, with learnable
/// per-channel scale and shift. Pass Var{} as beta for a scale-only norm.
Var global_layer_norm(Var x, Var gamma, Var beta, double eps = 1e-8);

Var sum(Var x);
Var mean(Var x);
Var dot(Var a, Var b);
Var sum_squares(Var x);
Var clamp(Var x, double lo, double hi);

/// x: Cin x T, w: Cout x (Cin/groups) x K, b: Cout (optional, pass Var{}).
Var conv1d(Var x, Var w, Var b, const ConvOptions& opt);
/// v: C x L, w: C x Cout x K, b: Cout (optional). Adjoint of conv1d's data
/// path: kSame yields T = L * stride, kValid yields (L - 1) * stride + K.
Var transposed_conv1d(Var v, Var w, Var b, const ConvOptions& opt);

Var upsample_nearest(Var x, std::size_t length);
Var rows(Var x, std::size_t begin, std::size_t count);
/// Row i of a rank-2 tensor as a rank-1 tensor.
Var row(Var x, std::size_t i);
Var stack_rows(std::span<const Var> parts);
Var reshape(Var x, Shape shape);
/// Keeps the first `length` entries of the last axis.
Var crop(Var x, std::size_t length);
/// Single element `index` of x as a scalar.
Var element(Var x, std::size_t index);

/// Forward value is `hard`; the gradient passes to `soft` unchanged.
Var straight_through(Var soft, double hard);
/// processed * gate + skipped * (1 - gate). Forward selects bit-exactly when
/// the gate value is exactly 0 or 1.
Var gate_mix(Var processed, Var skipped, Var gate);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace latref

#endif  // LATREF_AUTODIFF_HPP_
