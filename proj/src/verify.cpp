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

#include "bplf/verify.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include "bplf/data.hpp"
#include "bplf/flow_model.hpp"
#include "bplf/runtime.hpp"
#include "bplf/svd.hpp"
#include "bplf/training.hpp"

namespace bplf {

namespace {

constexpr CouplingKind kCouplings[] = {CouplingKind::kAdditive, CouplingKind::kAffine, CouplingKind::kBplf};
constexpr ConvKind kConvs[] = {ConvKind::k3x3, ConvKind::k3x3And1x1};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

/// Tracks the worst observed error and the case that produced it.
struct Worst {
  double error = 0.0;
  std::string where;
  bool failed = false;

  void add(double err, double tol, const std::string& label) {
    if (!(err <= tol)) {
      if (!failed || !(err <= error)) where = label;
      failed = true;
    }
    if (!(err <= error)) {
      error = err;
      if (!failed) where = label;
    }
  }
};

SuiteResult finish(std::string name, std::uint64_t seed, const Worst& w, std::chrono::steady_clock::time_point start,
                   const std::string& metric) {
  SuiteResult r;
  r.name = std::move(name);
  r.seed = seed;
  r.passed = !w.failed;
  r.detail = metric + " " + fmt(w.error) + (w.where.empty() ? "" : " (" + w.where + ")");
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

template <typename T>
SuiteResult guarded(const std::string& name, std::uint64_t seed, const std::function<SuiteResult()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {name, false, std::string("raised: ") + e.what(), seed, 0.0};
  }
}

// Parameter noise for the finite-difference suite. Much larger noise drives
// coupling scales towards zero and the central-difference Jacobian becomes
// too ill-conditioned to serve as an oracle.
constexpr double kJacobianPerturbation = 0.1;

std::string kind_label(CouplingKind c, ConvKind v, bool cond) {
  return to_string(c) + "/" + to_string(v) + (cond ? "/conditional" : "/unconditional");
}

template <typename T>
void roundtrip_model(CouplingKind c, ConvKind v, bool cond, std::uint64_t seed, std::size_t inputs, double tol,
                     Worst& worst) {
  ArchitectureConfig arch;
  arch.levels = 2;
  arch.depth = 2;
  arch.hidden = 16;
  arch.coupling = c;
  arch.conv = v;
  arch.conditional = cond;
  arch.num_classes = 3;
  arch.channels = 4;
  arch.height = 8;
  arch.width = 8;
  const std::uint64_t s = derive_seed(seed, "roundtrip/" + kind_label(c, v, cond));
  FlowModel<T> model(arch, s);
  perturb_parameters(model.parameters(), 0.05, s);
  std::mt19937_64 rng(s);
  const Tensor<T> x = uniform_tensor<T>({inputs, 4, 8, 8}, rng);
  Condition condition;
  if (cond) {
    condition.num_classes = 3;
    for (std::size_t i = 0; i < inputs; ++i) condition.labels.push_back(rng() % 3);
  }
  const auto enc = model.encode(x, condition);
  const Tensor<T> back = model.decode(enc.parts, condition);
  worst.add(max_abs_diff(x, back), tol, kind_label(c, v, cond) + (sizeof(T) == 4 ? " f32" : " f64"));
}

double sum_log(const Tensor<double>& t, std::size_t item) {
  const std::size_t per = t.size() / t.dim(0);
  double acc = 0.0;
  for (std::size_t i = item * per; i < (item + 1) * per; ++i) acc += std::log(t[i]);
  return acc;
}

Tensor<double> item_slice(const Tensor<double>& x, std::size_t begin, std::size_t end) {
  Tape<double> tape(false);
  return ops::slice_channels(tape.constant(x), begin, end).value();
}

}  // namespace

SuiteResult roundtrip_suite(std::uint64_t seed, std::size_t inputs) {
  return guarded<double>("round-trip", seed, [&] {
    const auto start = std::chrono::steady_clock::now();
    Worst worst;
    for (auto c : kCouplings)
      for (auto v : kConvs)
        for (bool cond : {false, true}) {
          roundtrip_model<float>(c, v, cond, seed, inputs, 1e-4, worst);
          roundtrip_model<double>(c, v, cond, seed, inputs, 1e-10, worst);
        }
    return finish("round-trip", seed, worst, start, "max |decode(encode(x)) - x|");
  });
}

SuiteResult logdet_oracle_suite(std::uint64_t seed) {
  return guarded<double>("log-det oracle", seed, [&] {
    const auto start = std::chrono::steady_clock::now();
    Worst worst;
    std::mt19937_64 rng(derive_seed(seed, "logdet"));
    const std::size_t n = 2, c = 4, h = 4, w = 4;
    const double ln_s = std::log(1.0 / (1.0 + std::exp(-kScaleOffset)));
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };

    for (auto v : kConvs) {
      // Zero-initialized couplings are a uniform contraction.
      for (auto kind : kCouplings) {
        auto layer = make_coupling<double>(kind, "zero", c, 0, 8, v, seed);
        const auto out = layer->apply(uniform_tensor<double>({n, c, h, w}, rng));
        const double per_elem = kind == CouplingKind::kAdditive ? 0.0
                                : kind == CouplingKind::kAffine ? 0.5 * ln_s
                                                                : ln_s;
        const double expected = per_elem * static_cast<double>(c * h * w);
        for (std::size_t i = 0; i < n; ++i)
          worst.add(rel(out.log_det[i], expected), 1e-9, "zero-init " + to_string(kind) + "/" + to_string(v));
      }

      // Perturbed couplings against log-scales recomputed from their nets.
      {
        AffineCoupling<double> layer("affine", c, 0, 8, v, derive_seed(seed, "affine"));
        perturb_parameters(layer.parameters(), 0.3, seed);
        const Tensor<double> x = uniform_tensor<double>({n, c, h, w}, rng);
        const auto out = layer.apply(x);
        Tape<double> tape(false);
        const auto ss = layer.net().scale_shift(tape.constant(item_slice(x, 0, c / 2)), {});
        for (std::size_t i = 0; i < n; ++i)
          worst.add(rel(out.log_det[i], sum_log(ss.scale.value(), i)), 1e-9, "affine/" + to_string(v));
      }
      {
        BplfCoupling<double> layer("bplf", c, 0, 8, v, derive_seed(seed, "bplf"));
        perturb_parameters(layer.parameters(), 0.3, seed);
        const Tensor<double> x = uniform_tensor<double>({n, c, h, w}, rng);
        const auto out = layer.apply(x);
        Tape<double> tape(false);
        const auto s1 = layer.g1().scale_shift(tape.constant(item_slice(x, c / 2, c)), {});
        const auto s2 = layer.g2().scale_shift(tape.constant(item_slice(out.y, 0, c / 2)), {});
        for (std::size_t i = 0; i < n; ++i)
          worst.add(rel(out.log_det[i], sum_log(s1.scale.value(), i) + sum_log(s2.scale.value(), i)), 1e-9,
                    "bplf/" + to_string(v));
      }
    }

    // 1x1 convolution against a direct determinant.
    InvConv1x1<double> inv("invconv", c, derive_seed(seed, "invconv"));
    perturb_parameters(inv.parameters(), 0.3, seed);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wm(
        inv.weight().value.data().data(), c, c);
    const double expected = static_cast<double>(h * w) * std::log(std::abs(wm.determinant()));
    const auto out = inv.apply(uniform_tensor<double>({n, c, h, w}, rng));
    for (std::size_t i = 0; i < n; ++i) worst.add(rel(out.log_det[i], expected), 1e-9, "invconv");

    return finish("log-det oracle", seed, worst, start, "max relative log-det error");
  });
}

SuiteResult jacobian_suite(std::uint64_t seed, std::size_t instances) {
  return guarded<double>("jacobian oracle", seed, [&] {
    const auto start = std::chrono::steady_clock::now();
    Worst worst;
    const Shape shape{1, 4, 2, 2};  // D = 16

    auto check = [&](const std::string& label, const std::function<FlowLayer<double>::Evaluated(const Tensor<double>&)>& f,
                     const Tensor<double>& x) {
      const double analytic = f(x).log_det[0];
      const double numeric = numerical_logdet([&](const Tensor<double>& p) { return f(p).y; }, x);
      worst.add(std::abs(analytic - numeric), 1e-6, label);
    };

    for (std::size_t i = 0; i < instances; ++i) {
      const std::string tag = " #" + std::to_string(i);
      for (auto kind : kCouplings)
        for (auto v : kConvs)
          for (bool cond : {false, true}) {
            const std::string label = kind_label(kind, v, cond);
            const std::uint64_t s = derive_seed(seed, "jacobian/" + label + tag);
            auto layer = make_coupling<double>(kind, "layer", 4, cond ? 3 : 0, 8, v, s);
            perturb_parameters(layer->parameters(), kJacobianPerturbation, s);
            std::mt19937_64 rng(s);
            const Condition c = cond ? Condition::single(rng() % 3, 3) : Condition{};
            check(label + tag, [&](const Tensor<double>& x) { return layer->apply(x, c); },
                  uniform_tensor<double>(shape, rng));
          }

      const std::uint64_t s = derive_seed(seed, "jacobian/invconv" + tag);
      std::mt19937_64 rng(s);
      InvConv1x1<double> inv("invconv", 4, s);
      perturb_parameters(inv.parameters(), kJacobianPerturbation, s);
      check("invconv" + tag, [&](const Tensor<double>& x) { return inv.apply(x); },
            uniform_tensor<double>(shape, rng));

      check("squeeze" + tag,
            [](const Tensor<double>& x) {
              return FlowLayer<double>::Evaluated{squeeze(x), Tensor<double>(Shape{1}, 0.0)};
            },
            uniform_tensor<double>({1, 1, 4, 4}, rng));

      // invconv -> affine -> bplf
      InvConv1x1<double> a("c/invconv", 4, derive_seed(s, "a"));
      AffineCoupling<double> b("c/affine", 4, 0, 8, ConvKind::k3x3, derive_seed(s, "b"));
      BplfCoupling<double> d("c/bplf", 4, 0, 8, ConvKind::k3x3And1x1, derive_seed(s, "d"));
      for (FlowLayer<double>* l : std::initializer_list<FlowLayer<double>*>{&a, &b, &d})
        perturb_parameters(l->parameters(), kJacobianPerturbation, s);
      check("composition" + tag,
            [&](const Tensor<double>& x) {
              auto r1 = a.apply(x);
              auto r2 = b.apply(r1.y);
              auto r3 = d.apply(r2.y);
              Tensor<double> ld(Shape{1}, r1.log_det[0] + r2.log_det[0] + r3.log_det[0]);
              return FlowLayer<double>::Evaluated{r3.y, ld};
            },
            uniform_tensor<double>(shape, rng));
    }
    return finish("jacobian oracle", seed, worst, start, "max |analytic - numerical log-det|");
  });
}

SuiteResult gradient_suite(std::uint64_t seed) {
  return guarded<double>("gradient check", seed, [&] {
    const auto start = std::chrono::steady_clock::now();
    Worst worst;
    const double h = 1e-5, floor = 1e-3;
    struct Case {
      CouplingKind coupling;
      ConvKind conv;
      bool conditional;
    };
    const Case cases[] = {{CouplingKind::kAdditive, ConvKind::k3x3, false},
                          {CouplingKind::kAffine, ConvKind::k3x3, false},
                          {CouplingKind::kBplf, ConvKind::k3x3, false},
                          {CouplingKind::kBplf, ConvKind::k3x3And1x1, true}};
    for (const auto& cs : cases) {
      ArchitectureConfig arch;
      arch.levels = 1;
      arch.depth = 1;
      arch.hidden = 8;
      arch.coupling = cs.coupling;
      arch.conv = cs.conv;
      arch.conditional = cs.conditional;
      arch.num_classes = 2;
      arch.height = 4;
      arch.width = 4;  // D = 16
      const std::string label = kind_label(cs.coupling, cs.conv, cs.conditional);
      const std::uint64_t s = derive_seed(seed, "gradient/" + label);
      FlowModel<double> model(arch, s);
      perturb_parameters(model.parameters(), 0.1, s);
      std::mt19937_64 rng(s);
      const Tensor<double> x = uniform_tensor<double>({2, 1, 4, 4}, rng);
      const Condition cond = cs.conditional ? Condition{{0, 1}, 2} : Condition{};

      for (auto* p : model.parameters()) p->zero_grad();
      {
        Tape<double> tape;
        tape.backward(nll_loss(model, tape.constant(x), cond));
      }
      for (auto* p : model.parameters()) {
        auto values = p->value.data();
        for (std::size_t j = 0; j < values.size(); ++j) {
          const double orig = values[j];
          values[j] = orig + h;
          const double up = nll_loss(model, x, cond);
          values[j] = orig - h;
          const double down = nll_loss(model, x, cond);
          values[j] = orig;
          const double numeric = (up - down) / (2 * h);
          const double analytic = p->grad[j];
          const double err =
              std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
          worst.add(err, 1e-4, label + " " + p->name + "[" + std::to_string(j) + "]");
        }
      }
    }
    return finish("gradient check", seed, worst, start, "max relative gradient error");
  });
}

SuiteResult quantization_suite() {
  return guarded<double>("quantization", 0, [&] {
    const auto start = std::chrono::steady_clock::now();
    Worst worst;
    std::vector<float> pixels(256);
    for (int p = 0; p < 256; ++p) pixels[p] = static_cast<float>(p);
    const Tensor<float> px(Shape{256}, pixels);
    std::mt19937_64 rng(7);
    for (bool train : {false, true}) {
      const auto f32 = to_image(to_model_input<float>(px, train, &rng));
      const auto f64 = to_image(to_model_input<double>(px, train, &rng));
      for (int p = 0; p < 256; ++p) {
        const std::string mode = train ? "train" : "eval";
        worst.add(std::abs(int{f32[p]} - p), 0, mode + " f32 pixel " + std::to_string(p));
        worst.add(std::abs(int{f64[p]} - p), 0, mode + " f64 pixel " + std::to_string(p));
      }
    }
    return finish("quantization", 0, worst, start, "max pixel error");
  });
}

SuiteResult metric_suite() {
  return guarded<double>("bits/dim algebra", 0, [&] {
    const auto start = std::chrono::steady_clock::now();
    Worst worst;
    for (std::size_t d : {1u, 16u, 3072u}) {
      const double bpd = bits_per_dim(std::log(128.0) * static_cast<double>(d), d);
      worst.add(std::abs(bpd), 1e-12, "ln128*D at D=" + std::to_string(d));
    }
    worst.add(std::abs(bits_per_dim(0.0, 1) - 7.0), 0.0, "LL=0, D=1");
    return finish("bits/dim algebra", 0, worst, start, "max deviation");
  });
}

SuiteResult svd_suite(std::uint64_t seed, std::size_t matrices) {
  return guarded<double>("svd", seed, [&] {
    const auto start = std::chrono::steady_clock::now();
    Worst worst;
    std::mt19937_64 rng(derive_seed(seed, "svd"));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t n : {8u, 16u})
      for (std::size_t m = 0; m < matrices; ++m) {
        const std::string tag = std::to_string(n) + "x" + std::to_string(n) + " #" + std::to_string(m);
        std::vector<double> a(n * n);
        for (auto& v : a) v = normal(rng);
        const SvdResult svd = jacobi_svd(a, n, n);

        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> am(a.data(), n, n);
        const Eigen::VectorXd ref = Eigen::JacobiSVD<Eigen::MatrixXd>(am).singularValues();
        for (std::size_t i = 0; i < n; ++i) worst.add(std::abs(svd.sigma[i] - ref[i]), 1e-8, "sigma " + tag);

        for (std::size_t k = 0; k <= n; ++k) {
          const auto rec = reconstruct(svd, k);
          double err = 0.0, discarded = 0.0;
          for (std::size_t i = 0; i < a.size(); ++i) err += (a[i] - rec[i]) * (a[i] - rec[i]);
          for (std::size_t i = k; i < n; ++i) discarded += svd.sigma[i] * svd.sigma[i];
          worst.add(std::abs(err - discarded), 1e-8, "Eckart-Young k=" + std::to_string(k) + " " + tag);
        }

        const Tensor<double> img(Shape{1, n, n}, a);
        worst.add(max_abs_diff(svd_truncate(img, SvdConfig::with_energy(1.0)), img), 1e-8, "energy 1.0 " + tag);
      }
    return finish("svd", seed, worst, start, "max error");
  });
}

std::vector<SuiteResult> run_checks(std::uint64_t seed, bool deep) {
  std::vector<SuiteResult> out;
  out.push_back(roundtrip_suite(seed));
  out.push_back(logdet_oracle_suite(seed));
  out.push_back(gradient_suite(seed));
  out.push_back(quantization_suite());
  out.push_back(metric_suite());
  out.push_back(svd_suite(seed));
  if (deep) out.push_back(jacobian_suite(seed));
  return out;
}

}  // namespace bplf
