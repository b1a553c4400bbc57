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

#include "bplf/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "bplf/linalg.hpp"
#include "bplf/runtime.hpp"

namespace bplf {

template <typename T>
void Parameter<T>::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor<T>(value.shape());
  } else {
    std::fill(grad.data().begin(), grad.data().end(), T(0));
  }
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var<T>(this, it->second);
  nodes_.push_back(Node{p.value, {}, &p, tracking_});
  param_ids_.emplace(&p, nodes_.size() - 1);
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
  bool needs = false;
  for (const auto& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
  needs = needs && tracking_;
  nodes_.push_back(Node{std::move(value), needs ? std::move(backward) : Backward{}, nullptr, needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
  bool needs = false;
  for (const auto& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
  needs = needs && tracking_;
  nodes_.push_back(Node{std::move(value), needs ? std::move(backward) : Backward{}, nullptr, needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& grad) {
  if (!nodes_[id].requires_grad) return;
  auto& slot = grads_[id];
  if (!slot) {
    slot = grad;
    return;
  }
  if (slot->shape() != grad.shape())
    fail(ErrorKind::kShapeMismatch, "gradient " + to_string(grad.shape()) + " for node of shape " +
                                        to_string(slot->shape()));
  auto dst = slot->data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) fail(ErrorKind::kInvalidArgument, "loss belongs to a different tape");
  if (loss.value().size() != 1)
    fail(ErrorKind::kShapeMismatch, "backward needs a scalar loss, got " + to_string(loss.shape()));
  replayed_ = 0;
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[loss.id()] = Tensor<T>(loss.shape(), T(1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (!grads_[i]) continue;
    Node& node = nodes_[i];
    if (node.param != nullptr) {
      auto& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
      auto dst = p.grad.data();
      auto src = grads_[i]->data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    } else if (node.backward) {
      Tensor<T> g = std::move(*grads_[i]);
      grads_[i].reset();
      node.backward(*this, g);
      ++replayed_;
    }
    grads_[i].reset();
  }
  grads_.clear();
}

namespace ops {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

constexpr double kGuard = 1e-12;

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) fail(ErrorKind::kInvalidArgument, std::string(op) + ": operands on different tapes");
  if (a.shape() != b.shape())
    fail(ErrorKind::kShapeMismatch,
         std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename T, typename F>
Tensor<T> map1(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> map2(const Tensor<T>& a, const Tensor<T>& b, F f) {
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

// Elementwise unary op whose derivative is expressed through input and output.
template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F f, D dfdx) {
  Tape<T>& tape = a.tape();
  const std::size_t ia = a.id();
  Tensor<T> out = map1(a.value(), f);
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a}, [ia, io, dfdx](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ia);
    const auto& y = t.value(io);
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * dfdx(x[i], y[i]);
    t.accumulate(ia, gx);
  });
}

template <typename T>
T guarded_divisor(T b) {
  if (std::abs(b) >= T(kGuard)) return b;
  if (verification_mode())
    fail(ErrorKind::kNumericGuard, "divisor magnitude below 1e-12 (" + std::to_string(b) + ")");
  return b < 0 ? T(-kGuard) : T(kGuard);
}

template <typename T>
T guarded_log_arg(T a) {
  if (a >= T(kGuard)) return a;
  if (verification_mode())
    fail(ErrorKind::kNumericGuard, "log argument below 1e-12 (" + std::to_string(a) + ")");
  return T(kGuard);
}

struct Dims4 {
  std::size_t n, c, h, w;
  bool batched;
};

Dims4 dims4(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  fail(ErrorKind::kShapeMismatch, std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + to_string(s));
}

Shape shape4(const Dims4& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.n, c, h, w};
  return {c, h, w};
}

// [N,C,H,W] -> [C, N*H*W]
template <typename T>
MatR<T> channel_major(const Tensor<T>& x, const Dims4& d) {
  const std::size_t hw = d.h * d.w;
  MatR<T> m(d.c, d.n * hw);
  const T* src = x.data().data();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      std::copy_n(src + (n * d.c + c) * hw, hw, m.data() + c * d.n * hw + n * hw);
  return m;
}

template <typename T>
void from_channel_major(const MatR<T>& m, const Dims4& d, T* dst) {
  const std::size_t hw = d.h * d.w;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      std::copy_n(m.data() + c * d.n * hw + n * hw, hw, dst + (n * d.c + c) * hw);
}

// Columns of one image: rows (ci,ky,kx), cols (y,x). `cols` must be
// (c*k*k) x (h*w).
template <typename T>
void im2col(const T* src, std::size_t c, std::size_t h, std::size_t w, std::size_t k, MatR<T>& cols) {
  const std::size_t hw = h * w;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* out = cols.data() + ((ci * k + ky) * k + kx) * hw;
        const T* plane = src + ci * hw;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
        const std::size_t x1 = ox > 0 ? w - static_cast<std::size_t>(ox) : w;
        for (std::size_t y = 0; y < h; ++y) {
          T* row = out + y * w;
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + oy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(row, w, T(0));
            continue;
          }
          std::fill_n(row, x0, T(0));
          std::fill(row + x1, row + w, T(0));
          const T* in = plane + static_cast<std::size_t>(sy) * w + ox;
          for (std::size_t xx = x0; xx < x1; ++xx) row[xx] = in[xx];
        }
      }
}

template <typename T>
void col2im_add(const MatR<T>& cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* dst) {
  const std::size_t hw = h * w;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* in = cols.data() + ((ci * k + ky) * k + kx) * hw;
        T* plane = dst + ci * hw;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
        const std::size_t x1 = ox > 0 ? w - static_cast<std::size_t>(ox) : w;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + oy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* out = plane + static_cast<std::size_t>(sy) * w + ox;
          const T* row = in + y * w;
          for (std::size_t xx = x0; xx < x1; ++xx) out[xx] += row[xx];
        }
      }
}

// For each input element, the flat index of the output element it reduces into.
std::vector<std::size_t> reduction_index(const Shape& in, const std::vector<std::size_t>& axes, Shape& out) {
  std::vector<bool> drop(in.size(), false);
  for (auto a : axes) {
    if (a >= in.size())
      fail(ErrorKind::kInvalidArgument, "axis " + std::to_string(a) + " out of range for " + to_string(in));
    drop[a] = true;
  }
  out.clear();
  for (std::size_t i = 0; i < in.size(); ++i)
    if (!drop[i]) out.push_back(in[i]);
  std::vector<std::size_t> out_stride(in.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (drop[i]) continue;
    out_stride[i] = stride;
    stride *= in[i];
  }
  const std::size_t total = numel(in);
  std::vector<std::size_t> index(total);
  std::vector<std::size_t> coord(in.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < in.size(); ++i) o += coord[i] * out_stride[i];
    index[flat] = o;
    for (std::size_t i = in.size(); i-- > 0;) {
      if (++coord[i] < in[i]) break;
      coord[i] = 0;
    }
  }
  return index;
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape("add", a, b);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(map2(a.value(), b.value(), [](T x, T y) { return x + y; }), {a, b},
                         [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                           t.accumulate(ia, g);
                           t.accumulate(ib, g);
                         });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape("sub", a, b);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(map2(a.value(), b.value(), [](T x, T y) { return x - y; }), {a, b},
                         [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                           t.accumulate(ia, g);
                           if (t.requires_grad(ib)) t.accumulate(ib, map1(g, [](T v) { return -v; }));
                         });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape("mul", a, b);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(map2(a.value(), b.value(), [](T x, T y) { return x * y; }), {a, b},
                         [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                           if (t.requires_grad(ia)) t.accumulate(ia, map2(g, t.value(ib), [](T u, T v) { return u * v; }));
                           if (t.requires_grad(ib)) t.accumulate(ib, map2(g, t.value(ia), [](T u, T v) { return u * v; }));
                         });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  require_same_shape("div", a, b);
  const auto ia = a.id(), ib = b.id();
  Tensor<T> out = map2(a.value(), b.value(), [](T x, T y) { return x / guarded_divisor(y); });
  const std::size_t io = a.tape().size();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, io](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(ib);
    if (t.requires_grad(ia)) t.accumulate(ia, map2(g, y, [](T u, T v) { return u / guarded_divisor(v); }));
    if (t.requires_grad(ib)) {
      const auto& q = t.value(io);
      Tensor<T> gb(y.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -g[i] * q[i] / guarded_divisor(y[i]);
      t.accumulate(ib, gb);
    }
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(guarded_log_arg(x)); },
               [](T x, T) { return T(1) / guarded_log_arg(x); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary(a,
               [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
               [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> log_sigmoid(Var<T> a) {
  return unary(a, [](T x) { return std::min(x, T(0)) - std::log1p(std::exp(-std::abs(x))); },
               [](T x, T) {
                 // d/dx log sigmoid(x) = sigmoid(-x)
                 return x >= 0 ? std::exp(-x) / (T(1) + std::exp(-x)) : T(1) / (T(1) + std::exp(x));
               });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  if (!(lo <= hi)) fail(ErrorKind::kInvalidArgument, "clamp bounds out of order");
  return unary(a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
               [lo, hi](T x, T) { return x >= lo && x <= hi ? T(1) : T(0); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> elu(Var<T> a) {
  return unary(a, [](T x) { return x > 0 ? x : std::expm1(x); },
               [](T x, T y) { return x > 0 ? T(1) : y + T(1); });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  return unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& x = a.value();
  // Pairwise-free but in fixed order; double accumulator for float inputs.
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const auto ia = a.id();
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [ia](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ia, Tensor<T>(t.value(ia).shape(), g.item()));
  });
}

template <typename T>
Var<T> sum(Var<T> a, const std::vector<std::size_t>& axes) {
  Shape out_shape;
  auto index = reduction_index(a.shape(), axes, out_shape);
  std::vector<double> acc(numel(out_shape), 0.0);
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) acc[index[i]] += x[i];
  Tensor<T> out(out_shape, std::vector<T>(acc.begin(), acc.end()));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, index = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(t.value(ia).shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[index[i]];
    t.accumulate(ia, gx);
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias) {
  const Dims4 d = dims4(input.shape(), "conv2d");
  const Shape& ks = kernel.shape();
  if (ks.size() != 4 || ks[2] != ks[3] || (ks[2] != 1 && ks[2] != 3))
    fail(ErrorKind::kShapeMismatch, "conv2d: kernel must be [C_out,C_in,k,k] with k in {1,3}, got " + to_string(ks));
  if (ks[1] != d.c)
    fail(ErrorKind::kShapeMismatch, "conv2d: input " + to_string(input.shape()) + " has " + std::to_string(d.c) +
                                        " channels but kernel " + to_string(ks) + " expects " + std::to_string(ks[1]));
  if (bias.shape() != Shape{ks[0]})
    fail(ErrorKind::kShapeMismatch, "conv2d: bias " + to_string(bias.shape()) + " does not match kernel " + to_string(ks));

  const std::size_t c_out = ks[0], k = ks[2], hw = d.h * d.w, rows = d.c * k * k;
  CMapR<T> kmat(kernel.value().data().data(), c_out, rows);
  const auto& b = bias.value();
  Tensor<T> out(shape4(d, c_out, d.h, d.w));
  {
    MatR<T> cols(k == 1 ? 0 : rows, hw);
    for (std::size_t n = 0; n < d.n; ++n) {
      const T* src = input.value().data().data() + n * d.c * hw;
      MapR<T> o(out.data().data() + n * c_out * hw, c_out, hw);
      if (k == 1) {
        o.noalias() = kmat * CMapR<T>(src, d.c, hw);
      } else {
        im2col(src, d.c, d.h, d.w, k, cols);
        o.noalias() = kmat * cols;
      }
      for (std::size_t co = 0; co < c_out; ++co) o.row(co).array() += b[co];
    }
  }

  const auto ix = input.id(), ik = kernel.id(), ib = bias.id();
  return input.tape().record(std::move(out), {input, kernel, bias},
                             [d, k, c_out, rows, hw, ix, ik, ib](Tape<T>& t, const Tensor<T>& g) {
                               const bool need_b = t.requires_grad(ib), need_k = t.requires_grad(ik),
                                          need_x = t.requires_grad(ix);
                               Tensor<T> gb(Shape{c_out});
                               Tensor<T> gk(t.value(ik).shape());
                               MapR<T> gkm(gk.data().data(), c_out, rows);
                               Tensor<T> gx(need_x ? t.value(ix).shape() : Shape{1});
                               CMapR<T> kmat(t.value(ik).data().data(), c_out, rows);
                               MatR<T> cols(k == 1 ? 0 : rows, hw), gcols(rows, hw);
                               for (std::size_t n = 0; n < d.n; ++n) {
                                 CMapR<T> gm(g.data().data() + n * c_out * hw, c_out, hw);
                                 const T* src = t.value(ix).data().data() + n * d.c * hw;
                                 if (need_b)
                                   for (std::size_t co = 0; co < c_out; ++co) {
                                     // Scalar loop: a vectorized sum would depend on buffer alignment.
                                     T acc = 0;
                                     for (std::size_t p = 0; p < hw; ++p) acc += gm(co, p);
                                     gb[co] += acc;
                                   }
                                 if (need_k) {
                                   if (k == 1) {
                                     gkm.noalias() += gm * CMapR<T>(src, d.c, hw).transpose();
                                   } else {
                                     im2col(src, d.c, d.h, d.w, k, cols);
                                     gkm.noalias() += gm * cols.transpose();
                                   }
                                 }
                                 if (need_x) {
                                   T* dst = gx.data().data() + n * d.c * hw;
                                   if (k == 1) {
                                     MapR<T>(dst, d.c, hw).noalias() += kmat.transpose() * gm;
                                   } else {
                                     gcols.noalias() = kmat.transpose() * gm;
                                     col2im_add(gcols, d.c, d.h, d.w, k, dst);
                                   }
                                 }
                               }
                               if (need_b) t.accumulate(ib, gb);
                               if (need_k) t.accumulate(ik, gk);
                               if (need_x) t.accumulate(ix, gx);
                             });
}

template <typename T>
Var<T> channel_mix(Var<T> input, Var<T> weight) {
  const Dims4 d = dims4(input.shape(), "channel_mix");
  if (weight.shape() != Shape{d.c, d.c})
    fail(ErrorKind::kShapeMismatch, "channel_mix: weight " + to_string(weight.shape()) + " for input " +
                                        to_string(input.shape()));
  const MatR<T> xm = channel_major(input.value(), d);
  CMapR<T> wm(weight.value().data().data(), d.c, d.c);
  MatR<T> ym(d.c, xm.cols());
  ym.noalias() = wm * xm;
  Tensor<T> out(input.shape());
  from_channel_major(ym, d, out.data().data());
  const auto ix = input.id(), iw = weight.id();
  return input.tape().record(std::move(out), {input, weight}, [d, ix, iw](Tape<T>& t, const Tensor<T>& g) {
    const MatR<T> gm = channel_major(g, d);
    if (t.requires_grad(iw)) {
      const MatR<T> xm = channel_major(t.value(ix), d);
      Tensor<T> gw(Shape{d.c, d.c});
      MapR<T>(gw.data().data(), d.c, d.c).noalias() = gm * xm.transpose();
      t.accumulate(iw, gw);
    }
    if (t.requires_grad(ix)) {
      CMapR<T> wm(t.value(iw).data().data(), d.c, d.c);
      MatR<T> gx = wm.transpose() * gm;
      Tensor<T> out(t.value(ix).shape());
      from_channel_major(gx, d, out.data().data());
      t.accumulate(ix, out);
    }
  });
}

template <typename T>
Var<T> log_abs_det(Var<T> matrix) {
  const Shape& s = matrix.shape();
  if (s.size() != 2 || s[0] != s[1]) fail(ErrorKind::kShapeMismatch, "log_abs_det: not square " + to_string(s));
  const std::size_t n = s[0];
  std::vector<double> m(matrix.value().data().begin(), matrix.value().data().end());
  const auto lu = linalg::lu_factor(m, n);
  const double value = lu.log_abs_det();
  if (!std::isfinite(value)) fail(ErrorKind::kSingularMatrix, "log_abs_det of a singular matrix");
  const auto im = matrix.id();
  return matrix.tape().record(Tensor<T>::scalar(static_cast<T>(value)), {matrix},
                              [im, n](Tape<T>& t, const Tensor<T>& g) {
                                // d log|det W| / dW = W^{-T}
                                const auto& w = t.value(im);
                                std::vector<double> wd(w.data().begin(), w.data().end());
                                const auto inv = linalg::lu_factor(wd, n).inverse();
                                Tensor<T> gw(Shape{n, n});
                                for (std::size_t r = 0; r < n; ++r)
                                  for (std::size_t c = 0; c < n; ++c)
                                    gw[r * n + c] = static_cast<T>(g.item() * inv[c * n + r]);
                                t.accumulate(im, gw);
                              });
}

template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end) {
  const Dims4 d = dims4(x.shape(), "slice_channels");
  if (begin >= end || end > d.c)
    fail(ErrorKind::kInvalidArgument, "slice_channels: [" + std::to_string(begin) + "," + std::to_string(end) +
                                          ") out of range for " + to_string(x.shape()));
  const std::size_t hw = d.h * d.w, c = end - begin;
  Tensor<T> out(shape4(d, c, d.h, d.w));
  const T* src = x.value().data().data();
  for (std::size_t n = 0; n < d.n; ++n)
    std::copy_n(src + (n * d.c + begin) * hw, c * hw, out.data().data() + n * c * hw);
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [d, begin, c, hw, ix](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(t.value(ix).shape());
    for (std::size_t n = 0; n < d.n; ++n)
      std::copy_n(g.data().data() + n * c * hw, c * hw, gx.data().data() + (n * d.c + begin) * hw);
    t.accumulate(ix, gx);
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) fail(ErrorKind::kInvalidArgument, "concat_channels: no inputs");
  const Dims4 d0 = dims4(parts[0].shape(), "concat_channels");
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Dims4 d = dims4(p.shape(), "concat_channels");
    if (d.n != d0.n || d.h != d0.h || d.w != d0.w || d.batched != d0.batched)
      fail(ErrorKind::kShapeMismatch,
           "concat_channels: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
    channels.push_back(d.c);
    total += d.c;
  }
  const std::size_t hw = d0.h * d0.w;
  Tensor<T> out(shape4(d0, total, d0.h, d0.w));
  for (std::size_t n = 0; n < d0.n; ++n) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      std::copy_n(parts[p].value().data().data() + n * channels[p] * hw, channels[p] * hw,
                  out.data().data() + (n * total + offset) * hw);
      offset += channels[p];
    }
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(std::move(out), parts,
                                [d0, channels, total, hw, ids](Tape<T>& t, const Tensor<T>& g) {
                                  std::size_t offset = 0;
                                  for (std::size_t p = 0; p < ids.size(); ++p) {
                                    if (t.requires_grad(ids[p])) {
                                      Tensor<T> gp(t.value(ids[p]).shape());
                                      for (std::size_t n = 0; n < d0.n; ++n)
                                        std::copy_n(g.data().data() + (n * total + offset) * hw, channels[p] * hw,
                                                    gp.data().data() + n * channels[p] * hw);
                                      t.accumulate(ids[p], gp);
                                    }
                                    offset += channels[p];
                                  }
                                });
}

namespace {

// Flat-index permutation for squeeze: squeezed[perm[i]] = x[i].
std::vector<std::size_t> squeeze_permutation(const Dims4& d) {
  std::vector<std::size_t> perm(d.n * d.c * d.h * d.w);
  const std::size_t h2 = d.h / 2, w2 = d.w / 2, c4 = d.c * 4;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) {
          const std::size_t q = (y % 2) * 2 + (x % 2);
          const std::size_t src = ((n * d.c + c) * d.h + y) * d.w + x;
          const std::size_t dst = ((n * c4 + c * 4 + q) * h2 + y / 2) * w2 + x / 2;
          perm[src] = dst;
        }
  return perm;
}

template <typename T>
Var<T> permute(Var<T> x, Shape out_shape, std::vector<std::size_t> perm, bool forward) {
  const auto& v = x.value();
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (forward) {
      out[perm[i]] = v[i];
    } else {
      out[i] = v[perm[i]];
    }
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, perm = std::move(perm), forward](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(t.value(ix).shape());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      if (forward) {
        gx[i] = g[perm[i]];
      } else {
        gx[perm[i]] = g[i];
      }
    }
    t.accumulate(ix, gx);
  });
}

}  // namespace

template <typename T>
Var<T> squeeze2d(Var<T> x) {
  const Dims4 d = dims4(x.shape(), "squeeze");
  if (d.h % 2 || d.w % 2)
    fail(ErrorKind::kShapeMismatch, "squeeze needs even spatial sides, got " + to_string(x.shape()));
  return permute(x, shape4(d, d.c * 4, d.h / 2, d.w / 2), squeeze_permutation(d), true);
}

template <typename T>
Var<T> unsqueeze2d(Var<T> x) {
  const Dims4 s = dims4(x.shape(), "unsqueeze");
  if (s.c % 4) fail(ErrorKind::kShapeMismatch, "unsqueeze needs a channel count divisible by 4, got " + to_string(x.shape()));
  const Dims4 d{s.n, s.c / 4, s.h * 2, s.w * 2, s.batched};
  return permute(x, shape4(d, d.c, d.h, d.w), squeeze_permutation(d), false);
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ix, g.reshaped(t.value(ix).shape()));
  });
}

template <typename T>
Var<T> expand_scalar(Var<T> x, Shape shape) {
  Tensor<T> out(std::move(shape), x.value().item());
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    double acc = 0.0;
    for (T v : g.data()) acc += v;
    t.accumulate(ix, Tensor<T>(t.value(ix).shape(), static_cast<T>(acc)));
  });
}

#define BPLF_INSTANTIATE_OPS(T)                                                      \
  template Var<T> add(Var<T>, Var<T>);                                               \
  template Var<T> sub(Var<T>, Var<T>);                                               \
  template Var<T> mul(Var<T>, Var<T>);                                               \
  template Var<T> div(Var<T>, Var<T>);                                               \
  template Var<T> exp(Var<T>);                                                       \
  template Var<T> log(Var<T>);                                                       \
  template Var<T> sigmoid(Var<T>);                                                   \
  template Var<T> log_sigmoid(Var<T>);                                               \
  template Var<T> clamp(Var<T>, T, T);                                               \
  template Var<T> relu(Var<T>);                                                      \
  template Var<T> elu(Var<T>);                                                       \
  template Var<T> scale(Var<T>, T);                                                  \
  template Var<T> add_scalar(Var<T>, T);                                             \
  template Var<T> sum(Var<T>);                                                       \
  template Var<T> sum(Var<T>, const std::vector<std::size_t>&);                      \
  template Var<T> mean(Var<T>);                                                      \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>);                                    \
  template Var<T> channel_mix(Var<T>, Var<T>);                                       \
  template Var<T> log_abs_det(Var<T>);                                               \
  template Var<T> slice_channels(Var<T>, std::size_t, std::size_t);                  \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                       \
  template Var<T> squeeze2d(Var<T>);                                                 \
  template Var<T> unsqueeze2d(Var<T>);                                               \
  template Var<T> reshape(Var<T>, Shape);                                            \
  template Var<T> expand_scalar(Var<T>, Shape);

BPLF_INSTANTIATE_OPS(float)
BPLF_INSTANTIATE_OPS(double)
#undef BPLF_INSTANTIATE_OPS

}  // namespace ops

template struct Parameter<float>;
template struct Parameter<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace bplf
