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

#include "bplf/flow_model.hpp"

#include <random>

namespace bplf {

void ArchitectureConfig::validate() const {
  if (levels == 0 || depth == 0 || hidden == 0)
    fail(ErrorKind::kInvalidArgument, "levels, depth and hidden width must be positive");
  if (channels == 0 || height == 0 || width == 0) fail(ErrorKind::kInvalidArgument, "input shape must be positive");
  if (levels > 16) fail(ErrorKind::kInvalidArgument, "too many levels");
  const std::size_t block = std::size_t{1} << levels;
  if (height % block || width % block)
    fail(ErrorKind::kInvalidArgument, "input " + std::to_string(height) + "x" + std::to_string(width) +
                                          " is not divisible by 2^levels = " + std::to_string(block));
  if (conditional && num_classes == 0) fail(ErrorKind::kInvalidArgument, "conditional model needs num_classes > 0");
  svd.validate();
}

template <typename T>
FlowModel<T>::FlowModel(ArchitectureConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  const std::size_t cond_channels = config_.conditional ? config_.num_classes : 0;
  std::size_t c = config_.channels;
  for (std::size_t l = 0; l < config_.levels; ++l) {
    c *= 4;  // squeeze
    Level level;
    for (std::size_t k = 0; k < config_.depth; ++k) {
      const std::string prefix = "level" + std::to_string(l) + "/step" + std::to_string(k);
      level.invconvs.push_back(std::make_unique<InvConv1x1<T>>(prefix + "/invconv", c, seed));
      level.couplings.push_back(
          make_coupling<T>(config_.coupling, prefix + "/coupling", c, cond_channels, config_.hidden, config_.conv, seed));
    }
    levels_.push_back(std::move(level));
    if (l + 1 < config_.levels) c /= 2;  // split
  }
}

template <typename T>
Condition FlowModel<T>::resolve(const Condition& cond, std::size_t batch) const {
  if (!config_.conditional) {
    if (cond.present()) fail(ErrorKind::kLabel, "unconditional model was given a label");
    return {};
  }
  if (!cond.present()) fail(ErrorKind::kLabel, "conditional model needs a label");
  if (cond.num_classes != 0 && cond.num_classes != config_.num_classes)
    fail(ErrorKind::kLabel, "condition has " + std::to_string(cond.num_classes) + " classes, model has " +
                                std::to_string(config_.num_classes));
  Condition out{cond.labels, config_.num_classes};
  if (out.labels.size() == 1 && batch > 1) out.labels.assign(batch, out.labels[0]);
  if (out.labels.size() != batch)
    fail(ErrorKind::kLabel, std::to_string(out.labels.size()) + " labels for a batch of " + std::to_string(batch));
  for (auto label : out.labels)
    if (label >= config_.num_classes)
      fail(ErrorKind::kLabel, "label " + std::to_string(label) + " out of range for " +
                                  std::to_string(config_.num_classes) + " classes");
  return out;
}

template <typename T>
Encoding<T> FlowModel<T>::encode(Var<T> x, const Condition& cond) {
  const Shape& s = x.shape();
  const Shape expected = config_.input_shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != expected)
    fail(ErrorKind::kShapeMismatch, "model expects [N," + to_string(expected).substr(1) + ", got " + to_string(s));
  const Condition c = resolve(cond, s[0]);

  Encoding<T> out;
  Var<T> h = x;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    h = ops::squeeze2d(h);
    auto& level = levels_[l];
    for (std::size_t k = 0; k < level.couplings.size(); ++k) {
      auto a = level.invconvs[k]->forward(h, c);
      out.layer_log_dets.push_back(a.log_det);
      auto b = level.couplings[k]->forward(a.y, c);
      out.layer_log_dets.push_back(b.log_det);
      h = b.y;
    }
    if (l + 1 < levels_.size()) {
      const std::size_t half = h.shape()[1] / 2;
      out.parts.push_back(ops::slice_channels(h, half, 2 * half));
      h = ops::slice_channels(h, 0, half);
    }
  }
  out.parts.push_back(h);

  out.log_det = out.layer_log_dets.front();
  for (std::size_t i = 1; i < out.layer_log_dets.size(); ++i) out.log_det = ops::add(out.log_det, out.layer_log_dets[i]);
  return out;
}

template <typename T>
Var<T> FlowModel<T>::decode(const std::vector<Var<T>>& parts, const Condition& cond) {
  const auto shapes = latent_shapes();
  if (parts.size() != shapes.size())
    fail(ErrorKind::kShapeMismatch, "expected " + std::to_string(shapes.size()) + " latent parts, got " +
                                        std::to_string(parts.size()));
  const std::size_t n = parts[0].shape().empty() ? 0 : parts[0].shape()[0];
  for (std::size_t i = 0; i < parts.size(); ++i) {
    Shape want{n};
    want.insert(want.end(), shapes[i].begin(), shapes[i].end());
    if (parts[i].shape() != want)
      fail(ErrorKind::kShapeMismatch, "latent part " + std::to_string(i) + " has shape " +
                                          to_string(parts[i].shape()) + ", expected " + to_string(want));
  }
  const Condition c = resolve(cond, n);

  Var<T> h = parts.back();
  for (std::size_t l = levels_.size(); l-- > 0;) {
    if (l + 1 < levels_.size()) h = ops::concat_channels<T>({h, parts[l]});
    auto& level = levels_[l];
    for (std::size_t k = level.couplings.size(); k-- > 0;) {
      h = level.couplings[k]->inverse(h, c);
      h = level.invconvs[k]->inverse(h, c);
    }
    h = ops::unsqueeze2d(h);
  }
  return h;
}

template <typename T>
Var<T> FlowModel<T>::prior_log_prob(const std::vector<Var<T>>& parts) {
  Var<T> total;
  for (const auto& z : parts) {
    const std::size_t n = z.shape()[0];
    const std::size_t per_item = z.value().size() / n;
    auto quad = ops::sum(ops::scale(ops::mul(z, z), T(-0.5)), {1, 2, 3});
    auto term = ops::add_scalar(quad, static_cast<T>(-kHalfLog2Pi * static_cast<double>(per_item)));
    total = total.valid() ? ops::add(total, term) : term;
  }
  return total;
}

template <typename T>
Var<T> FlowModel<T>::log_likelihood(Var<T> x, const Condition& cond) {
  auto enc = encode(x, cond);
  return ops::add(prior_log_prob(enc.parts), enc.log_det);
}

namespace {

template <typename T>
Tensor<T> batched(const Tensor<T>& x) {
  if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  return x;
}

template <typename T>
Tensor<T> unbatched(const Tensor<T>& x) {
  return x.reshaped({x.dim(1), x.dim(2), x.dim(3)});
}

}  // namespace

template <typename T>
typename FlowModel<T>::Encoded FlowModel<T>::encode(const Tensor<T>& x, const Condition& cond) {
  Tape<T> tape(false);
  auto enc = encode(tape.constant(batched(x)), cond);
  Encoded out;
  for (auto& p : enc.parts) out.parts.push_back(x.rank() == 3 ? unbatched(p.value()) : p.value());
  out.log_det = enc.log_det.value();
  return out;
}

template <typename T>
Tensor<T> FlowModel<T>::decode(const LatentParts<T>& parts, const Condition& cond) {
  if (parts.empty()) fail(ErrorKind::kShapeMismatch, "no latent parts");
  Tape<T> tape(false);
  const bool single = parts[0].rank() == 3;
  std::vector<Var<T>> vars;
  for (const auto& p : parts) {
    if ((p.rank() == 3) != single) fail(ErrorKind::kShapeMismatch, "latent parts mix batched and unbatched shapes");
    vars.push_back(tape.constant(batched(p)));
  }
  Tensor<T> x = decode(vars, cond).value();
  return single ? unbatched(x) : x;
}

template <typename T>
Tensor<T> FlowModel<T>::log_likelihood(const Tensor<T>& x, const Condition& cond) {
  Tape<T> tape(false);
  return log_likelihood(tape.constant(batched(x)), cond).value();
}

template <typename T>
std::vector<Tensor<T>> FlowModel<T>::sample(std::size_t count, std::optional<std::size_t> label, double temperature,
                                            std::uint64_t seed) {
  if (!(temperature > 0.0)) fail(ErrorKind::kInvalidArgument, "temperature must be positive");
  Condition cond;
  if (label) cond = Condition::single(*label, config_.num_classes, count == 0 ? 1 : count);
  // Validate the label even when nothing is drawn.
  resolve(cond, cond.present() ? cond.labels.size() : 1);
  if (count == 0) return {};

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LatentParts<T> parts;
  for (const auto& s : latent_shapes()) {
    Shape shape{count};
    shape.insert(shape.end(), s.begin(), s.end());
    Tensor<T> z(shape);
    for (auto& v : z.data()) v = static_cast<T>(temperature * normal(rng));
    parts.push_back(std::move(z));
  }
  const Tensor<T> x = decode(parts, cond);
  std::vector<Tensor<T>> out;
  const std::size_t per_item = config_.dimensions();
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<T> item(x.data().begin() + static_cast<std::ptrdiff_t>(i * per_item),
                        x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per_item));
    out.emplace_back(config_.input_shape(), std::move(item));
  }
  return out;
}

template <typename T>
std::vector<Shape> FlowModel<T>::latent_shapes() const {
  std::vector<Shape> shapes;
  std::size_t c = config_.channels, h = config_.height, w = config_.width;
  for (std::size_t l = 0; l < config_.levels; ++l) {
    c *= 4;
    h /= 2;
    w /= 2;
    if (l + 1 < config_.levels) {
      shapes.push_back({c / 2, h, w});
      c /= 2;
    }
  }
  shapes.push_back({c, h, w});
  return shapes;
}

template <typename T>
std::vector<Parameter<T>*> FlowModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto* layer : layers())
    for (auto* p : layer->parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<InvConv1x1<T>*> FlowModel<T>::invconvs() {
  std::vector<InvConv1x1<T>*> out;
  for (auto& level : levels_)
    for (auto& inv : level.invconvs) out.push_back(inv.get());
  return out;
}

template <typename T>
std::vector<FlowLayer<T>*> FlowModel<T>::layers() {
  std::vector<FlowLayer<T>*> out;
  for (auto& level : levels_)
    for (std::size_t k = 0; k < level.couplings.size(); ++k) {
      out.push_back(level.invconvs[k].get());
      out.push_back(level.couplings[k].get());
    }
  return out;
}

template class FlowModel<float>;
template class FlowModel<double>;

}  // namespace bplf
