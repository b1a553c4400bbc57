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

#include "bplf/flow_layers.hpp"

#include <cmath>
#include <random>

#include "bplf/linalg.hpp"
#include "bplf/runtime.hpp"

namespace bplf {

std::string to_string(CouplingKind kind) {
  switch (kind) {
    case CouplingKind::kAdditive: return "additive";
    case CouplingKind::kAffine: return "affine";
    case CouplingKind::kBplf: return "bplf";
  }
  return "?";
}

std::string to_string(ConvKind kind) { return kind == ConvKind::k3x3 ? "3x3" : "3x3+1x1"; }

CouplingKind parse_coupling_kind(const std::string& name) {
  if (name == "additive") return CouplingKind::kAdditive;
  if (name == "affine") return CouplingKind::kAffine;
  if (name == "bplf") return CouplingKind::kBplf;
  fail(ErrorKind::kInvalidArgument, "unknown coupling '" + name + "' (expected additive, affine or bplf)");
}

ConvKind parse_conv_kind(const std::string& name) {
  if (name == "3x3") return ConvKind::k3x3;
  if (name == "3x3+1x1" || name == "3x3&1x1" || name == "1x1+3x3") return ConvKind::k3x3And1x1;
  fail(ErrorKind::kInvalidArgument, "unknown conv kind '" + name + "' (expected 3x3 or 3x3+1x1)");
}

template <typename T>
Tensor<T> condition_planes(const Condition& cond, std::size_t h, std::size_t w) {
  const std::size_t n = cond.labels.size(), k = cond.num_classes, hw = h * w;
  Tensor<T> planes(Shape{n, k, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = cond.labels[i];
    if (label >= k)
      fail(ErrorKind::kLabel, "label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
    std::fill_n(planes.data().begin() + static_cast<std::ptrdiff_t>((i * k + label) * hw), hw, T(1));
  }
  return planes;
}

namespace {

template <typename T>
std::size_t half_channels(const Var<T>& x, const char* layer) {
  const Shape& s = x.shape();
  if (s.size() != 4) fail(ErrorKind::kShapeMismatch, std::string(layer) + ": expected [N,C,H,W], got " + to_string(s));
  if (s[1] % 2)
    fail(ErrorKind::kShapeMismatch, std::string(layer) + ": channel count must be even, got " + to_string(s));
  return s[1] / 2;
}

template <typename T>
Var<T> per_item_sum(Var<T> v) {
  return ops::sum(v, {1, 2, 3});
}

template <typename T>
Var<T> zero_log_det(Var<T> x) {
  return x.tape().constant(Tensor<T>(Shape{x.shape()[0]}));
}

}  // namespace

template <typename T>
LayerOutput<T> additive_forward(Var<T> x, const ShiftFn<T>& m) {
  const std::size_t c = half_channels(x, "additive coupling");
  auto x1 = ops::slice_channels(x, 0, c);
  auto x2 = ops::slice_channels(x, c, 2 * c);
  auto h2 = ops::add(x2, m(x1));
  return {ops::concat_channels<T>({x1, h2}), zero_log_det(x)};
}

template <typename T>
Var<T> additive_inverse(Var<T> y, const ShiftFn<T>& m) {
  const std::size_t c = half_channels(y, "additive coupling");
  auto y1 = ops::slice_channels(y, 0, c);
  auto y2 = ops::slice_channels(y, c, 2 * c);
  return ops::concat_channels<T>({y1, ops::sub(y2, m(y1))});
}

template <typename T>
LayerOutput<T> affine_forward(Var<T> x, const ScaleShiftFn<T>& st) {
  const std::size_t c = half_channels(x, "affine coupling");
  auto x1 = ops::slice_channels(x, 0, c);
  auto x2 = ops::slice_channels(x, c, 2 * c);
  const auto p = st(x1);
  auto h2 = ops::add(ops::mul(p.scale, x2), p.shift);
  auto log_det = per_item_sum(p.log_scale);
  if (injected_fault() == Fault::kAffineLogDetSign) log_det = ops::scale(log_det, T(-1));
  return {ops::concat_channels<T>({x1, h2}), log_det};
}

template <typename T>
Var<T> affine_inverse(Var<T> y, const ScaleShiftFn<T>& st) {
  const std::size_t c = half_channels(y, "affine coupling");
  auto y1 = ops::slice_channels(y, 0, c);
  auto y2 = ops::slice_channels(y, c, 2 * c);
  const auto p = st(y1);
  return ops::concat_channels<T>({y1, ops::div(ops::sub(y2, p.shift), p.scale)});
}

template <typename T>
LayerOutput<T> bplf_forward(Var<T> x, const ScaleShiftFn<T>& g1, const ScaleShiftFn<T>& g2) {
  const std::size_t c = half_channels(x, "bplf coupling");
  auto x1 = ops::slice_channels(x, 0, c);
  auto x2 = ops::slice_channels(x, c, 2 * c);
  const auto p1 = g1(x2);
  auto y1 = ops::add(ops::mul(p1.scale, x1), p1.shift);
  const auto p2 = g2(y1);
  auto y2 = ops::add(ops::mul(p2.scale, x2), p2.shift);
  auto log_det = ops::add(per_item_sum(p1.log_scale), per_item_sum(p2.log_scale));
  return {ops::concat_channels<T>({y1, y2}), log_det};
}

template <typename T>
Var<T> bplf_inverse(Var<T> y, const ScaleShiftFn<T>& g1, const ScaleShiftFn<T>& g2) {
  const std::size_t c = half_channels(y, "bplf coupling");
  auto y1 = ops::slice_channels(y, 0, c);
  auto y2 = ops::slice_channels(y, c, 2 * c);
  const auto p2 = g2(y1);
  auto x2 = ops::div(ops::sub(y2, p2.shift), p2.scale);
  const auto p1 = g1(x2);
  auto x1 = ops::div(ops::sub(y1, p1.shift), p1.scale);
  return ops::concat_channels<T>({x1, x2});
}

// ---------------------------------------------------------------------------
// CouplingNet

template <typename T>
CouplingNet<T>::CouplingNet(const std::string& name, std::size_t in_channels, std::size_t cond_channels,
                            std::size_t out_channels, std::size_t hidden, ConvKind conv, std::uint64_t seed)
    : in_channels_(in_channels), cond_channels_(cond_channels), out_channels_(out_channels) {
  if (in_channels == 0 || out_channels == 0 || hidden == 0)
    fail(ErrorKind::kInvalidArgument, "coupling net '" + name + "' needs positive channel counts");
  const std::size_t k0 = conv == ConvKind::k3x3 ? 3 : 1;
  const std::size_t sizes[3][3] = {
      {hidden, in_channels + cond_channels, k0}, {hidden, hidden, 3}, {out_channels, hidden, 3}};
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const auto [co, ci, k] = std::tuple(sizes[stage][0], sizes[stage][1], sizes[stage][2]);
    const std::string prefix = name + "/conv" + std::to_string(stage);
    Tensor<T> kernel(Shape{co, ci, k, k});
    if (stage < 2) {
      std::mt19937_64 rng(derive_seed(seed, prefix + "/kernel"));
      std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / static_cast<double>(ci * k * k)));
      for (auto& v : kernel.data()) v = static_cast<T>(normal(rng));
    }
    kernels_.emplace_back(prefix + "/kernel", std::move(kernel));
    biases_.emplace_back(prefix + "/bias", Tensor<T>(Shape{co}));
  }
}

template <typename T>
Var<T> CouplingNet<T>::forward(Var<T> x, const Condition& cond) {
  Tape<T>& tape = x.tape();
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != in_channels_)
    fail(ErrorKind::kShapeMismatch, "coupling net expects [N," + std::to_string(in_channels_) + ",H,W], got " +
                                        to_string(s));
  Var<T> h = x;
  if (cond_channels_ > 0) {
    if (!cond.present()) fail(ErrorKind::kLabel, "conditional coupling net needs a label");
    if (cond.num_classes != cond_channels_)
      fail(ErrorKind::kLabel, "net built for " + std::to_string(cond_channels_) + " classes, condition has " +
                                  std::to_string(cond.num_classes));
    if (cond.labels.size() != s[0])
      fail(ErrorKind::kLabel, std::to_string(cond.labels.size()) + " labels for a batch of " + std::to_string(s[0]));
    h = ops::concat_channels<T>({x, tape.constant(condition_planes<T>(cond, s[2], s[3]))});
  } else if (cond.present()) {
    fail(ErrorKind::kLabel, "coupling net was built without condition channels");
  }
  for (std::size_t stage = 0; stage < 3; ++stage) {
    h = ops::conv2d(h, tape.param(kernels_[stage]), tape.param(biases_[stage]));
    if (stage < 2) h = ops::elu(h);
  }
  return h;
}

template <typename T>
ScaleShift<T> CouplingNet<T>::scale_shift(Var<T> x, const Condition& cond) {
  if (out_channels_ % 2) fail(ErrorKind::kInvalidArgument, "scale/shift net needs an even output channel count");
  auto raw = forward(x, cond);
  const std::size_t c = out_channels_ / 2;
  auto a = ops::clamp(ops::add_scalar(ops::slice_channels(raw, 0, c), static_cast<T>(kScaleOffset)),
                      static_cast<T>(-kScaleLogitBound), static_cast<T>(kScaleLogitBound));
  return {ops::sigmoid(a), ops::log_sigmoid(a), ops::slice_channels(raw, c, 2 * c)};
}

template <typename T>
std::vector<Parameter<T>*> CouplingNet<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    out.push_back(&kernels_[i]);
    out.push_back(&biases_[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// FlowLayer wrappers

template <typename T>
typename FlowLayer<T>::Evaluated FlowLayer<T>::apply(const Tensor<T>& x, const Condition& cond) {
  Tape<T> tape(false);
  const bool unbatched = x.rank() == 3;
  auto in = tape.constant(unbatched ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x);
  auto out = forward(in, cond);
  Tensor<T> y = out.y.value();
  if (unbatched) y = y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
  return {std::move(y), out.log_det.value()};
}

template <typename T>
Tensor<T> FlowLayer<T>::invert(const Tensor<T>& y, const Condition& cond) {
  Tape<T> tape(false);
  const bool unbatched = y.rank() == 3;
  auto in = tape.constant(unbatched ? y.reshaped({1, y.dim(0), y.dim(1), y.dim(2)}) : y);
  Tensor<T> x = inverse(in, cond).value();
  if (unbatched) x = x.reshaped({x.dim(1), x.dim(2), x.dim(3)});
  return x;
}

// ---------------------------------------------------------------------------
// Couplings

namespace {

void require_even(std::size_t channels, const std::string& name) {
  if (channels == 0 || channels % 2)
    fail(ErrorKind::kShapeMismatch, name + ": coupling needs an even channel count, got " + std::to_string(channels));
}

}  // namespace

template <typename T>
AdditiveCoupling<T>::AdditiveCoupling(const std::string& name, std::size_t channels, std::size_t cond_channels,
                                      std::size_t hidden, ConvKind conv, std::uint64_t seed)
    : name_(name),
      channels_(channels),
      net_((require_even(channels, name), name + "/m"), channels / 2, cond_channels, channels / 2, hidden, conv,
           seed) {}

template <typename T>
LayerOutput<T> AdditiveCoupling<T>::forward(Var<T> x, const Condition& cond) {
  return additive_forward<T>(x, [&](Var<T> v) { return net_.forward(v, cond); });
}

template <typename T>
Var<T> AdditiveCoupling<T>::inverse(Var<T> y, const Condition& cond) {
  return additive_inverse<T>(y, [&](Var<T> v) { return net_.forward(v, cond); });
}

template <typename T>
AffineCoupling<T>::AffineCoupling(const std::string& name, std::size_t channels, std::size_t cond_channels,
                                  std::size_t hidden, ConvKind conv, std::uint64_t seed)
    : name_(name),
      channels_(channels),
      net_((require_even(channels, name), name + "/st"), channels / 2, cond_channels, channels, hidden, conv, seed) {}

template <typename T>
LayerOutput<T> AffineCoupling<T>::forward(Var<T> x, const Condition& cond) {
  return affine_forward<T>(x, [&](Var<T> v) { return net_.scale_shift(v, cond); });
}

template <typename T>
Var<T> AffineCoupling<T>::inverse(Var<T> y, const Condition& cond) {
  return affine_inverse<T>(y, [&](Var<T> v) { return net_.scale_shift(v, cond); });
}

template <typename T>
BplfCoupling<T>::BplfCoupling(const std::string& name, std::size_t channels, std::size_t cond_channels,
                              std::size_t hidden, ConvKind conv, std::uint64_t seed)
    : name_(name),
      channels_(channels),
      g1_((require_even(channels, name), name + "/g1"), channels / 2, cond_channels, channels, hidden, conv, seed),
      g2_(name + "/g2", channels / 2, cond_channels, channels, hidden, conv, seed) {}

template <typename T>
LayerOutput<T> BplfCoupling<T>::forward(Var<T> x, const Condition& cond) {
  return bplf_forward<T>(
      x, [&](Var<T> v) { return g1_.scale_shift(v, cond); }, [&](Var<T> v) { return g2_.scale_shift(v, cond); });
}

template <typename T>
Var<T> BplfCoupling<T>::inverse(Var<T> y, const Condition& cond) {
  return bplf_inverse<T>(
      y, [&](Var<T> v) { return g1_.scale_shift(v, cond); }, [&](Var<T> v) { return g2_.scale_shift(v, cond); });
}

template <typename T>
std::vector<Parameter<T>*> BplfCoupling<T>::parameters() {
  auto out = g1_.parameters();
  for (auto* p : g2_.parameters()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// InvConv1x1

template <typename T>
InvConv1x1<T>::InvConv1x1(const std::string& name, std::size_t channels, std::uint64_t seed) {
  if (channels == 0) fail(ErrorKind::kInvalidArgument, name + ": zero channels");
  const auto q = linalg::random_orthogonal(channels, derive_seed(seed, name + "/weight"));
  weight_ = Parameter<T>(name + "/weight", Tensor<T>(Shape{channels, channels}, std::vector<T>(q.begin(), q.end())));
}

template <typename T>
InvConv1x1<T>::InvConv1x1(const std::string& name, Tensor<T> weight) {
  if (weight.rank() != 2 || weight.dim(0) != weight.dim(1))
    fail(ErrorKind::kShapeMismatch, name + ": weight must be square, got " + to_string(weight.shape()));
  weight_ = Parameter<T>(name + "/weight", std::move(weight));
  check_invertible();
}

template <typename T>
double InvConv1x1<T>::abs_det() const {
  std::vector<double> w(weight_.value.data().begin(), weight_.value.data().end());
  return linalg::lu_factor(w, weight_.value.dim(0)).abs_det();
}

template <typename T>
void InvConv1x1<T>::check_invertible() const {
  std::vector<double> w(weight_.value.data().begin(), weight_.value.data().end());
  const double log_det = linalg::lu_factor(w, weight_.value.dim(0)).log_abs_det();
  if (!(log_det >= std::log(kMinAbsDet)))
    fail(ErrorKind::kSingularMatrix, weight_.name + ": |det W| below 1e-12");
}

template <typename T>
LayerOutput<T> InvConv1x1<T>::forward(Var<T> x, const Condition&) {
  check_invertible();
  const Shape& s = x.shape();
  if (s.size() != 4) fail(ErrorKind::kShapeMismatch, "invconv expects [N,C,H,W], got " + to_string(s));
  Tape<T>& tape = x.tape();
  auto w = tape.param(weight_);
  auto y = ops::channel_mix(x, w);
  auto per_item = ops::scale(ops::log_abs_det(w), static_cast<T>(s[2] * s[3]));
  return {y, ops::expand_scalar(per_item, Shape{s[0]})};
}

template <typename T>
Var<T> InvConv1x1<T>::inverse(Var<T> y, const Condition&) {
  check_invertible();
  const std::size_t c = weight_.value.dim(0);
  std::vector<double> w(weight_.value.data().begin(), weight_.value.data().end());
  const auto inv = linalg::lu_factor(w, c).inverse();
  auto w_inv = y.tape().constant(Tensor<T>(Shape{c, c}, std::vector<T>(inv.begin(), inv.end())));
  return ops::channel_mix(y, w_inv);
}

template <typename T>
std::unique_ptr<FlowLayer<T>> make_coupling(CouplingKind kind, const std::string& name, std::size_t channels,
                                            std::size_t cond_channels, std::size_t hidden, ConvKind conv,
                                            std::uint64_t seed) {
  switch (kind) {
    case CouplingKind::kAdditive:
      return std::make_unique<AdditiveCoupling<T>>(name, channels, cond_channels, hidden, conv, seed);
    case CouplingKind::kAffine:
      return std::make_unique<AffineCoupling<T>>(name, channels, cond_channels, hidden, conv, seed);
    case CouplingKind::kBplf:
      return std::make_unique<BplfCoupling<T>>(name, channels, cond_channels, hidden, conv, seed);
  }
  fail(ErrorKind::kInvalidArgument, "unknown coupling kind");
}

// ---------------------------------------------------------------------------
// Reshapes on tensors

template <typename T>
Tensor<T> squeeze(const Tensor<T>& x) {
  Tape<T> tape(false);
  return ops::squeeze2d(tape.constant(x)).value();
}

template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& x) {
  Tape<T> tape(false);
  return ops::unsqueeze2d(tape.constant(x)).value();
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& x) {
  const std::size_t axis = x.rank() == 4 ? 1 : 0;
  if (x.rank() < 3 || x.dim(axis) % 2)
    fail(ErrorKind::kShapeMismatch, "split needs an even channel count, got " + to_string(x.shape()));
  Tape<T> tape(false);
  auto v = tape.constant(x);
  const std::size_t c = x.dim(axis) / 2;
  return {ops::slice_channels(v, 0, c).value(), ops::slice_channels(v, c, 2 * c).value()};
}

template <typename T>
Tensor<T> concat(const Tensor<T>& pass, const Tensor<T>& out) {
  Tape<T> tape(false);
  return ops::concat_channels<T>({tape.constant(pass), tape.constant(out)}).value();
}

template <typename T>
void perturb_parameters(const std::vector<Parameter<T>*>& params, double stddev, std::uint64_t seed) {
  for (auto* p : params) {
    std::mt19937_64 rng(derive_seed(seed, p->name + "/perturb"));
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& v : p->value.data()) v = static_cast<T>(v + normal(rng));
  }
}

#define BPLF_INSTANTIATE_LAYERS(T)                                                                             \
  template Tensor<T> condition_planes<T>(const Condition&, std::size_t, std::size_t);                          \
  template LayerOutput<T> additive_forward<T>(Var<T>, const ShiftFn<T>&);                                      \
  template Var<T> additive_inverse<T>(Var<T>, const ShiftFn<T>&);                                              \
  template LayerOutput<T> affine_forward<T>(Var<T>, const ScaleShiftFn<T>&);                                   \
  template Var<T> affine_inverse<T>(Var<T>, const ScaleShiftFn<T>&);                                           \
  template LayerOutput<T> bplf_forward<T>(Var<T>, const ScaleShiftFn<T>&, const ScaleShiftFn<T>&);             \
  template Var<T> bplf_inverse<T>(Var<T>, const ScaleShiftFn<T>&, const ScaleShiftFn<T>&);                     \
  template class CouplingNet<T>;                                                                               \
  template class FlowLayer<T>;                                                                                 \
  template class AdditiveCoupling<T>;                                                                          \
  template class AffineCoupling<T>;                                                                            \
  template class BplfCoupling<T>;                                                                              \
  template class InvConv1x1<T>;                                                                                \
  template std::unique_ptr<FlowLayer<T>> make_coupling<T>(CouplingKind, const std::string&, std::size_t,       \
                                                          std::size_t, std::size_t, ConvKind, std::uint64_t);  \
  template Tensor<T> squeeze<T>(const Tensor<T>&);                                                             \
  template Tensor<T> unsqueeze<T>(const Tensor<T>&);                                                           \
  template std::pair<Tensor<T>, Tensor<T>> split<T>(const Tensor<T>&);                                         \
  template Tensor<T> concat<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template void perturb_parameters<T>(const std::vector<Parameter<T>*>&, double, std::uint64_t);

BPLF_INSTANTIATE_LAYERS(float)
BPLF_INSTANTIATE_LAYERS(double)

}  // namespace bplf
