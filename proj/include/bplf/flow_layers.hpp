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

// Invertible layers. All of them act on [N,C,H,W] batches; log-determinants
// are reported per batch item as an [N] tensor.
//
// Couplings split channels into halves x1 = channels [0, C/2) and
// x2 = [C/2, C). Scales produced by networks are s = sigmoid(a + 2), which
// keeps every scale inside (0, 1) and makes zero-initialized networks a
// uniform contraction by sigmoid(2).

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bplf/autodiff.hpp"

namespace bplf {

enum class CouplingKind { kAdditive, kAffine, kBplf };
enum class ConvKind { k3x3, k3x3And1x1 };

std::string to_string(CouplingKind kind);
std::string to_string(ConvKind kind);
CouplingKind parse_coupling_kind(const std::string& name);
/// Accepts "3x3", "3x3+1x1" and "3x3&1x1".
ConvKind parse_conv_kind(const std::string& name);

/// Offset added to the raw scale output before the sigmoid.
inline constexpr double kScaleOffset = 2.0;
/// Bound on the offset scale logit. Keeps float32 scales strictly inside (0, 1).
inline constexpr double kScaleLogitBound = 15.0;

/// Class labels for a batch, one per item. Empty means unconditional.
struct Condition {
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  bool present() const { return !labels.empty(); }
  static Condition single(std::size_t label, std::size_t num_classes, std::size_t batch = 1) {
    return Condition{std::vector<std::size_t>(batch, label), num_classes};
  }
};

/// One-hot labels broadcast to constant [N,K,H,W] planes.
template <typename T>
Tensor<T> condition_planes(const Condition& cond, std::size_t h, std::size_t w);

template <typename T>
struct LayerOutput {
  Var<T> y;
  Var<T> log_det;  // [N]
};

/// Per-element scale and shift produced for one coupling half.
template <typename T>
struct ScaleShift {
  Var<T> scale;
  Var<T> log_scale;
  Var<T> shift;
};

template <typename T>
using ShiftFn = std::function<Var<T>(Var<T>)>;
template <typename T>
using ScaleShiftFn = std::function<ScaleShift<T>(Var<T>)>;

// The coupling rules, written against arbitrary scale/shift providers so
// they can be exercised with hand-set stubs as well as networks.

/// h1 = x1, h2 = x2 + m(x1).
template <typename T>
LayerOutput<T> additive_forward(Var<T> x, const ShiftFn<T>& m);
template <typename T>
Var<T> additive_inverse(Var<T> y, const ShiftFn<T>& m);

/// h1 = x1, h2 = s(x1) * x2 + t(x1).
template <typename T>
LayerOutput<T> affine_forward(Var<T> x, const ScaleShiftFn<T>& st);
template <typename T>
Var<T> affine_inverse(Var<T> y, const ScaleShiftFn<T>& st);

/// (s1,mu1) = g1(x2); y1 = s1 * x1 + mu1; (s2,mu2) = g2(y1); y2 = s2 * x2 + mu2.
template <typename T>
LayerOutput<T> bplf_forward(Var<T> x, const ScaleShiftFn<T>& g1, const ScaleShiftFn<T>& g2);
/// x2 = (y2 - mu2) / s2 with g2(y1); then x1 = (y1 - mu1) / s1 with g1(x2).
template <typename T>
Var<T> bplf_inverse(Var<T> y, const ScaleShiftFn<T>& g1, const ScaleShiftFn<T>& g2);

/// Three convolution stages with ELU between them. Stage kernels are
/// 3-3-3 or 1-3-3 depending on ConvKind. The last stage starts at zero.
template <typename T>
class CouplingNet {
 public:
  CouplingNet(const std::string& name, std::size_t in_channels, std::size_t cond_channels,
              std::size_t out_channels, std::size_t hidden, ConvKind conv, std::uint64_t seed);

  /// `cond` must be present iff the net was built with condition channels.
  Var<T> forward(Var<T> x, const Condition& cond);

  /// Raw output split into the sigmoid-parametrized scale and the shift.
  ScaleShift<T> scale_shift(Var<T> x, const Condition& cond);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t cond_channels() const { return cond_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  std::vector<Parameter<T>*> parameters();

 private:
  std::size_t in_channels_, cond_channels_, out_channels_;
  std::vector<Parameter<T>> kernels_;
  std::vector<Parameter<T>> biases_;
};

template <typename T>
class FlowLayer {
 public:
  struct Evaluated {
    Tensor<T> y;
    Tensor<T> log_det;
  };

  virtual ~FlowLayer() = default;
  virtual LayerOutput<T> forward(Var<T> x, const Condition& cond) = 0;
  virtual Var<T> inverse(Var<T> y, const Condition& cond) = 0;
  virtual std::vector<Parameter<T>*> parameters() = 0;
  virtual std::string name() const = 0;

  /// Tensor-in/tensor-out convenience wrappers around a throwaway tape.
  Evaluated apply(const Tensor<T>& x, const Condition& cond = {});
  Tensor<T> invert(const Tensor<T>& y, const Condition& cond = {});
};

template <typename T>
class AdditiveCoupling final : public FlowLayer<T> {
 public:
  AdditiveCoupling(const std::string& name, std::size_t channels, std::size_t cond_channels, std::size_t hidden,
                   ConvKind conv, std::uint64_t seed);
  LayerOutput<T> forward(Var<T> x, const Condition& cond) override;
  Var<T> inverse(Var<T> y, const Condition& cond) override;
  std::vector<Parameter<T>*> parameters() override { return net_.parameters(); }
  std::string name() const override { return name_; }
  CouplingNet<T>& net() { return net_; }

 private:
  std::string name_;
  std::size_t channels_;
  CouplingNet<T> net_;
};

template <typename T>
class AffineCoupling final : public FlowLayer<T> {
 public:
  AffineCoupling(const std::string& name, std::size_t channels, std::size_t cond_channels, std::size_t hidden,
                 ConvKind conv, std::uint64_t seed);
  LayerOutput<T> forward(Var<T> x, const Condition& cond) override;
  Var<T> inverse(Var<T> y, const Condition& cond) override;
  std::vector<Parameter<T>*> parameters() override { return net_.parameters(); }
  std::string name() const override { return name_; }
  CouplingNet<T>& net() { return net_; }

 private:
  std::string name_;
  std::size_t channels_;
  CouplingNet<T> net_;
};

template <typename T>
class BplfCoupling final : public FlowLayer<T> {
 public:
  BplfCoupling(const std::string& name, std::size_t channels, std::size_t cond_channels, std::size_t hidden,
               ConvKind conv, std::uint64_t seed);
  LayerOutput<T> forward(Var<T> x, const Condition& cond) override;
  Var<T> inverse(Var<T> y, const Condition& cond) override;
  std::vector<Parameter<T>*> parameters() override;
  std::string name() const override { return name_; }
  CouplingNet<T>& g1() { return g1_; }
  CouplingNet<T>& g2() { return g2_; }

 private:
  std::string name_;
  std::size_t channels_;
  CouplingNet<T> g1_, g2_;
};

/// y = W x at every pixel; log-det H*W*log|det W|. W starts as a random
/// orthogonal matrix.
template <typename T>
class InvConv1x1 final : public FlowLayer<T> {
 public:
  /// |det W| below this is treated as singular.
  static constexpr double kMinAbsDet = 1e-12;

  InvConv1x1(const std::string& name, std::size_t channels, std::uint64_t seed);
  /// Explicit weight, row-major C x C.
  InvConv1x1(const std::string& name, Tensor<T> weight);

  LayerOutput<T> forward(Var<T> x, const Condition& cond) override;
  Var<T> inverse(Var<T> y, const Condition& cond) override;
  std::vector<Parameter<T>*> parameters() override { return {&weight_}; }
  std::string name() const override { return weight_.name; }

  Parameter<T>& weight() { return weight_; }
  double abs_det() const;

 private:
  void check_invertible() const;
  Parameter<T> weight_;
};

/// Builds the coupling of the requested kind.
template <typename T>
std::unique_ptr<FlowLayer<T>> make_coupling(CouplingKind kind, const std::string& name, std::size_t channels,
                                            std::size_t cond_channels, std::size_t hidden, ConvKind conv,
                                            std::uint64_t seed);

// Volume-preserving reshapes on plain tensors ([C,H,W] or [N,C,H,W]).
template <typename T>
Tensor<T> squeeze(const Tensor<T>& x);
template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& x);
/// Channel halves: (first C/2 channels, remaining C/2 channels).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& x);
template <typename T>
Tensor<T> concat(const Tensor<T>& pass, const Tensor<T>& out);

/// Adds N(0, stddev^2) noise to every parameter element.
template <typename T>
void perturb_parameters(const std::vector<Parameter<T>*>& params, double stddev, std::uint64_t seed);

}  // namespace bplf
