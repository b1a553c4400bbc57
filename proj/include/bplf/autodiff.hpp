// Copyright 2026 The BPLF Authors
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
// Every op evaluates eagerly and appends one node holding its value plus a
// closure that maps the node's output adjoint onto its inputs' adjoints.
// `Tape::backward` walks the nodes once in reverse order. Parameters enter
// the tape as leaves; their adjoints are added into `Parameter::grad`.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bplf/tensor.hpp"

namespace bplf {

template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad();
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  /// Called with the node's output adjoint; must route it to the inputs via
  /// `accumulate`.
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  /// With `track_gradients == false` nothing is retained for backward.
  explicit Tape(bool track_gradients = true) : tracking_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  /// Appends an op result. `backward` is dropped when no input needs a
  /// gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward);

  void backward(Var<T> loss);

  void accumulate(std::size_t id, const Tensor<T>& grad);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  bool tracking() const { return tracking_; }

  /// Number of backward closures run by the last `backward` call.
  std::size_t replayed() const { return replayed_; }

 private:
  struct Node {
    Tensor<T> value;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
  bool tracking_;
  std::size_t replayed_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

namespace ops {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
/// Guarded: |b| is clamped to 1e-12 (or raises in verification mode).
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> exp(Var<T> a);
/// Guarded: the argument is clamped at 1e-12 (or raises in verification mode).
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
/// log(sigmoid(a)) evaluated without forming sigmoid(a).
template <typename T> Var<T> log_sigmoid(Var<T> a);
/// Clamped to [lo, hi]; the gradient is zero outside the interval.
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> elu(Var<T> a);
template <typename T> Var<T> scale(Var<T> a, T c);
template <typename T> Var<T> add_scalar(Var<T> a, T c);

/// Full reduction to a rank-0 tensor.
template <typename T> Var<T> sum(Var<T> a);
/// Reduction over the listed axes; the reduced axes are dropped.
template <typename T> Var<T> sum(Var<T> a, const std::vector<std::size_t>& axes);
/// Mean of all elements.
template <typename T> Var<T> mean(Var<T> a);

/// Cross-correlation with zero padding (k-1)/2 so spatial size is preserved.
/// `input` is [C_in,H,W] or [N,C_in,H,W]; `kernel` is [C_out,C_in,k,k] with
/// k in {1,3}; `bias` is [C_out].
template <typename T> Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias);

/// Per-pixel channel mix: y[n,c,h,w] = sum_d W[c,d] x[n,d,h,w].
template <typename T> Var<T> channel_mix(Var<T> input, Var<T> weight);

/// log|det W| of a square matrix by partial-pivot elimination.
template <typename T> Var<T> log_abs_det(Var<T> matrix);

/// Channels [begin, end) of an [N,C,H,W] tensor.
template <typename T> Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& parts);

/// [N,C,H,W] -> [N,4C,H/2,W/2]; block order top-left, top-right,
/// bottom-left, bottom-right.
template <typename T> Var<T> squeeze2d(Var<T> x);
template <typename T> Var<T> unsqueeze2d(Var<T> x);

template <typename T> Var<T> reshape(Var<T> x, Shape shape);

/// Copies a single-element tensor to every element of `shape`.
template <typename T> Var<T> expand_scalar(Var<T> x, Shape shape);

}  // namespace ops

extern template struct Parameter<float>;
extern template struct Parameter<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bplf
