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

#include <algorithm>
#include <numeric>

#include "bplf/flow_layers.hpp"
#include "bplf/training.hpp"
#include "test_util.hpp"

using namespace bplf;
using bplf::testing::error_kind_of;
using bplf::testing::max_diff;
using bplf::testing::random_tensor;

namespace {

const double kSig2 = 1.0 / (1.0 + std::exp(-2.0));  // 0.8807970779778823

ScaleShiftFn<double> constant_scale_shift(std::vector<double> s, std::vector<double> mu) {
  return [s, mu](Var<double> x) {
    auto& t = x.tape();
    const Shape shape = x.shape();
    auto scale = t.constant(Tensor<double>(shape, s));
    std::vector<double> ls(s.size());
    std::transform(s.begin(), s.end(), ls.begin(), [](double v) { return std::log(v); });
    return ScaleShift<double>{scale, t.constant(Tensor<double>(shape, ls)), t.constant(Tensor<double>(shape, mu))};
  };
}

std::unique_ptr<FlowLayer<double>> make_layer(const std::string& kind, std::size_t channels, std::size_t classes,
                                              ConvKind conv, std::uint64_t seed) {
  if (kind == "invconv") return std::make_unique<InvConv1x1<double>>("w", channels, seed);
  return make_coupling<double>(parse_coupling_kind(kind), kind, channels, classes, 8, conv, seed);
}

}  // namespace

TEST_SUITE("flow-layers") {
  TEST_CASE("additive coupling with an identity shift stub") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::from({1, 2, 1, 1}, {1.0, 2.0}));
    auto out = additive_forward<double>(x, [](Var<double> v) { return v; });
    CHECK(out.y.value()[0] == 1.0);
    CHECK(out.y.value()[1] == 3.0);
    CHECK(out.log_det.value()[0] == 0.0);
    const auto back = additive_inverse<double>(out.y, [](Var<double> v) { return v; }).value();
    CHECK(back == x.value());
  }

  TEST_CASE("affine coupling with hand-set scale and shift") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::from({1, 4, 1, 1}, {7, -3, 2, 4}));
    auto st = constant_scale_shift({2, 2}, {1, 0});
    auto out = affine_forward<double>(x, st);
    const auto& y = out.y.value();
    CHECK(y[0] == 7.0);
    CHECK(y[1] == -3.0);
    CHECK(y[2] == 5.0);
    CHECK(y[3] == 8.0);
    CHECK(out.log_det.value()[0] == doctest::Approx(1.386294).epsilon(1e-6));
    CHECK(max_diff(affine_inverse<double>(out.y, st).value(), x.value()) == 0.0);
  }

  TEST_CASE("bplf coupling with hand-set scale and shift") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::from({1, 2, 1, 1}, {1, 2}));
    auto g1 = constant_scale_shift({2}, {1});
    auto g2 = constant_scale_shift({0.5}, {0});
    auto out = bplf_forward<double>(x, g1, g2);
    CHECK(out.y.value()[0] == 3.0);
    CHECK(out.y.value()[1] == 1.0);
    CHECK(std::abs(out.log_det.value()[0]) < 1e-15);
    CHECK(max_diff(bplf_inverse<double>(out.y, g1, g2).value(), x.value()) == 0.0);
  }

  TEST_CASE("bplf inverse consults g2 on y1 first, then g1 on the recovered x2") {
    // g1 depends on its input, so using the wrong order changes the result.
    ScaleShiftFn<double> g1 = [](Var<double> v) {
      auto s = ops::sigmoid(v);
      return ScaleShift<double>{s, ops::log_sigmoid(v), ops::scale(v, 0.5)};
    };
    ScaleShiftFn<double> g2 = [](Var<double> v) {
      auto a = ops::add_scalar(ops::scale(v, -0.3), 1.0);
      return ScaleShift<double>{ops::sigmoid(a), ops::log_sigmoid(a), ops::mul(v, v)};
    };
    Tape<double> tape;
    auto x = tape.constant(random_tensor<double>({3, 4, 2, 3}, 5));
    auto out = bplf_forward<double>(x, g1, g2);
    CHECK(max_diff(bplf_inverse<double>(out.y, g1, g2).value(), x.value()) < 1e-12);
  }

  TEST_CASE("zero-initialized couplings are a uniform contraction by sigmoid(2)") {
    CHECK(kSig2 == doctest::Approx(0.880797).epsilon(1e-6));
    const auto x = random_tensor<double>({2, 4, 3, 3}, 9);
    const std::size_t half = 2 * 3 * 3;
    for (ConvKind conv : {ConvKind::k3x3, ConvKind::k3x3And1x1}) {
      AdditiveCoupling<double> add("a", 4, 0, 8, conv, 1);
      auto r = add.apply(x);
      CHECK(r.y == x);
      CHECK(r.log_det[0] == 0.0);

      AffineCoupling<double> aff("f", 4, 0, 8, conv, 1);
      r = aff.apply(x);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const bool second_half = (i % (4 * 9)) >= half;
        CHECK(r.y[i] == doctest::Approx(second_half ? kSig2 * x[i] : x[i]).epsilon(1e-14));
      }
      CHECK(r.log_det[0] == doctest::Approx(half * std::log(kSig2)).epsilon(1e-12));

      BplfCoupling<double> bp("b", 4, 0, 8, conv, 1);
      r = bp.apply(x);
      for (std::size_t i = 0; i < x.size(); ++i) CHECK(r.y[i] == doctest::Approx(kSig2 * x[i]).epsilon(1e-14));
      CHECK(r.log_det[1] == doctest::Approx(36 * std::log(kSig2)).epsilon(1e-12));
    }
  }

  TEST_CASE("zero-initialized conditional nets ignore the label") {
    BplfCoupling<double> layer("b", 4, 3, 8, ConvKind::k3x3, 2);
    const auto x = random_tensor<double>({1, 4, 4, 4}, 3);
    const auto y0 = layer.apply(x, Condition::single(0, 3)).y;
    const auto y2 = layer.apply(x, Condition::single(2, 3)).y;
    CHECK(y0 == y2);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y0[i] == doctest::Approx(kSig2 * x[i]).epsilon(1e-14));
  }

  TEST_CASE("perturbed conditional nets separate labels and still invert") {
    for (const std::string kind : {"additive", "affine", "bplf"}) {
      CAPTURE(kind);
      auto layer = make_layer(kind, 4, 3, ConvKind::k3x3And1x1, 4);
      perturb_parameters(layer->parameters(), 0.2, 5);
      const auto x = random_tensor<double>({2, 4, 4, 4}, 6);
      const auto c1 = Condition::single(1, 3, 2);
      const auto ya = layer->apply(x, Condition::single(0, 3, 2)).y;
      const auto yb = layer->apply(x, c1).y;
      CHECK(max_diff(ya, yb) > 1e-3);
      CHECK(max_diff(layer->invert(yb, c1), x) < 1e-10);
    }
  }

  TEST_CASE("conditioning errors") {
    BplfCoupling<double> cond_layer("b", 4, 3, 8, ConvKind::k3x3, 2);
    BplfCoupling<double> plain("p", 4, 0, 8, ConvKind::k3x3, 2);
    const auto x = random_tensor<double>({1, 4, 2, 2}, 3);
    CHECK(error_kind_of([&] { cond_layer.apply(x, Condition::single(3, 3)); }) == ErrorKind::kLabel);
    CHECK(error_kind_of([&] { cond_layer.apply(x); }) == ErrorKind::kLabel);
    CHECK(error_kind_of([&] { plain.apply(x, Condition::single(0, 3)); }) == ErrorKind::kLabel);
  }

  TEST_CASE("condition planes are constant one-hot maps") {
    const auto planes = condition_planes<double>(Condition{{2, 0}, 3}, 2, 2);
    CHECK(planes.shape() == Shape{2, 3, 2, 2});
    const std::vector<double> expect{0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
    CHECK(planes.vector() == expect);
  }

  TEST_CASE("odd channel counts are rejected") {
    CHECK(error_kind_of([] { AffineCoupling<double>("a", 3, 0, 8, ConvKind::k3x3, 1); }) ==
          ErrorKind::kShapeMismatch);
    AffineCoupling<double> layer("a", 4, 0, 8, ConvKind::k3x3, 1);
    CHECK(error_kind_of([&] { layer.apply(Tensor<double>({1, 3, 2, 2})); }) == ErrorKind::kShapeMismatch);
    CHECK(error_kind_of([] { split(Tensor<double>({3, 2, 2})); }) == ErrorKind::kShapeMismatch);
  }

  TEST_CASE("invertible 1x1 convolution examples") {
    const auto x = random_tensor<double>({1, 2, 2, 2}, 4);
    InvConv1x1<double> ident("i", Tensor<double>::from({2, 2}, {1, 0, 0, 1}));
    auto r = ident.apply(x);
    CHECK(r.y == x);
    CHECK(r.log_det[0] == 0.0);

    InvConv1x1<double> twice("t", Tensor<double>::from({1, 1}, {2}));
    const auto x1 = random_tensor<double>({1, 1, 2, 2}, 5);
    r = twice.apply(x1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.y[i] == 2 * x1[i]);
    CHECK(r.log_det[0] == doctest::Approx(4 * std::log(2.0)).epsilon(1e-15));

    InvConv1x1<double> swap("s", Tensor<double>::from({2, 2}, {0, 1, 1, 0}));
    r = swap.apply(x);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(r.y[i] == x[4 + i]);
      CHECK(r.y[4 + i] == x[i]);
    }
    CHECK(r.log_det[0] == 0.0);
  }

  TEST_CASE("random orthogonal initialization has |det W| = 1") {
    for (std::size_t c : {2u, 4u, 12u}) {
      InvConv1x1<double> layer("w", c, 17 + c);
      CHECK(layer.abs_det() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("singular 1x1 weights are rejected") {
    CHECK(error_kind_of([] { InvConv1x1<double>("w", Tensor<double>::from({2, 2}, {1, 2, 2, 4})); }) ==
          ErrorKind::kSingularMatrix);
    InvConv1x1<double> layer("w", 2, 3);
    layer.weight().value = Tensor<double>::from({2, 2}, {1e-7, 0, 0, 1e-7});
    CHECK(error_kind_of([&] { layer.apply(Tensor<double>({1, 2, 1, 1})); }) == ErrorKind::kSingularMatrix);
  }

  TEST_CASE("squeeze and split examples") {
    Tensor<double> x({1, 4, 4});
    std::iota(x.data().begin(), x.data().end(), 0.0);
    const auto s = squeeze(x);
    CHECK(s.shape() == Shape{4, 2, 2});
    auto sorted = s.vector();
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == x.vector());
    // Channel 1 holds the top-right pixel of each 2x2 block.
    CHECK(s[4] == 1.0);
    CHECK(s[5] == 3.0);
    CHECK(unsqueeze(s) == x);
    CHECK(squeeze(Tensor<double>({3, 2, 2})).shape() == Shape{12, 1, 1});
    CHECK(error_kind_of([] { squeeze(Tensor<double>({1, 3, 4})); }) == ErrorKind::kShapeMismatch);

    const auto y = random_tensor<double>({4, 2, 2}, 8);
    const auto [pass, out] = split(y);
    CHECK(pass.shape() == Shape{2, 2, 2});
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(pass[i] == y[i]);
      CHECK(out[i] == y[8 + i]);
    }
    CHECK(concat(pass, out) == y);
  }

  TEST_CASE("every layer inverts its forward pass in 64-bit") {
    std::uint64_t seed = 100;
    for (const char* kind : {"additive", "affine", "bplf", "invconv"})
      for (ConvKind conv : {ConvKind::k3x3, ConvKind::k3x3And1x1})
        for (std::size_t classes : {0u, 3u}) {
          CAPTURE(kind);
          auto layer = make_layer(kind, 4, classes, conv, ++seed);
          perturb_parameters(layer->parameters(), 0.2, ++seed);
          double worst = 0.0;
          for (int rep = 0; rep < 10; ++rep) {
            const auto x = random_tensor<double>({2, 4, 4, 4}, ++seed, -1.0, 1.0);
            const Condition c = classes ? Condition{{static_cast<std::size_t>(rep % 3), 1}, classes} : Condition{};
            worst = std::max(worst, max_diff(layer->invert(layer->apply(x, c).y, c), x));
          }
          CHECK(worst < 1e-10);
        }
  }

  TEST_CASE("analytic log-det matches the numerical Jacobian at D = 16") {
    std::uint64_t seed = 300;
    for (const char* kind : {"additive", "affine", "bplf", "invconv"})
      for (ConvKind conv : {ConvKind::k3x3, ConvKind::k3x3And1x1}) {
        CAPTURE(kind);
        auto layer = make_layer(kind, 4, 0, conv, ++seed);
        perturb_parameters(layer->parameters(), 0.1, ++seed);
        const auto x = random_tensor<double>({1, 4, 2, 2}, ++seed);
        const double analytic = layer->apply(x).log_det[0];
        const double numeric = numerical_logdet([&](const Tensor<double>& v) { return layer->apply(v).y; }, x);
        CHECK(std::abs(analytic - numeric) < 1e-6);
      }
  }

  TEST_CASE("log-dets of stacked layers add up") {
    InvConv1x1<double> w("w", 4, 1);
    AffineCoupling<double> aff("a", 4, 0, 8, ConvKind::k3x3, 2);
    perturb_parameters(aff.parameters(), 0.1, 3);
    const auto x = random_tensor<double>({1, 4, 2, 2}, 4);
    const auto r1 = w.apply(x);
    const auto r2 = aff.apply(r1.y);
    const double numeric = numerical_logdet([&](const Tensor<double>& v) { return aff.apply(w.apply(v).y).y; }, x);
    CHECK(std::abs(r1.log_det[0] + r2.log_det[0] - numeric) < 1e-6);
  }

  TEST_CASE("scales stay inside (0, 1) even with large raw outputs") {
    AffineCoupling<double> layer("a", 4, 0, 8, ConvKind::k3x3, 1);
    perturb_parameters(layer.parameters(), 2.0, 2);
    Tape<double> tape;
    auto x = tape.constant(random_tensor<double>({2, 2, 4, 4}, 3, -3, 3));
    const auto st = layer.net().scale_shift(x, {});
    for (double s : st.scale.value().data()) {
      CHECK(s > 0.0);
      CHECK(s < 1.0);
    }
  }

  TEST_CASE("32-bit scales stay inside (0, 1) even with large raw outputs") {
    AffineCoupling<float> layer("a", 4, 0, 8, ConvKind::k3x3, 1);
    perturb_parameters(layer.parameters(), 2.0, 2);
    Tape<float> tape;
    auto x = tape.constant(random_tensor<float>({2, 2, 4, 4}, 3, -3, 3));
    const auto st = layer.net().scale_shift(x, {});
    for (float s : st.scale.value().data()) {
      CHECK(s > 0.0f);
      CHECK(s < 1.0f);
    }
    for (float l : st.log_scale.value().data()) CHECK(std::isfinite(l));
  }

  TEST_CASE("parse and print layer kinds") {
    CHECK(parse_coupling_kind("bplf") == CouplingKind::kBplf);
    CHECK(parse_coupling_kind("affine") == CouplingKind::kAffine);
    CHECK(parse_conv_kind("3x3&1x1") == ConvKind::k3x3And1x1);
    CHECK(parse_conv_kind(to_string(ConvKind::k3x3And1x1)) == ConvKind::k3x3And1x1);
    CHECK(error_kind_of([] { parse_coupling_kind("glow"); }) == ErrorKind::kInvalidArgument);
  }
}
