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

// Multi-scale flow. Encoding runs, for each level,
//
//   squeeze -> depth x (1x1 invertible conv -> coupling) -> split
//
// with no split after the last level. Latent parts are ordered as the split
// outputs of levels 0..L-2 followed by the last level's full output. Every
// latent element has a standard normal prior.

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "bplf/flow_layers.hpp"
#include "bplf/svd.hpp"

namespace bplf {

struct ArchitectureConfig {
  std::size_t levels = 3;
  std::size_t depth = 8;
  CouplingKind coupling = CouplingKind::kBplf;
  ConvKind conv = ConvKind::k3x3;
  std::size_t hidden = 64;
  bool conditional = false;
  std::size_t num_classes = 7;
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  SvdConfig svd;

  /// Throws kInvalidArgument; the divisibility message names 2^levels.
  void validate() const;
  std::size_t dimensions() const { return channels * height * width; }
  Shape input_shape() const { return {channels, height, width}; }

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

template <typename T>
using LatentParts = std::vector<Tensor<T>>;

template <typename T>
struct Encoding {
  std::vector<Var<T>> parts;
  Var<T> log_det;                      // [N]
  std::vector<Var<T>> layer_log_dets;  // [N] each, in application order
};

template <typename T>
class FlowModel {
 public:
  FlowModel(ArchitectureConfig config, std::uint64_t seed);

  const ArchitectureConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  // Tape-level API on [N,C,H,W] batches.
  Encoding<T> encode(Var<T> x, const Condition& cond);
  Var<T> decode(const std::vector<Var<T>>& parts, const Condition& cond);
  /// Per-item log-likelihood [N] in nats.
  Var<T> log_likelihood(Var<T> x, const Condition& cond);
  /// Per-item standard-normal log-density of the latent parts, [N].
  Var<T> prior_log_prob(const std::vector<Var<T>>& parts);

  // Tensor API. A rank-3 input is treated as a single item and the outputs
  // keep rank 3.
  struct Encoded {
    LatentParts<T> parts;
    Tensor<T> log_det;  // [N]
  };
  Encoded encode(const Tensor<T>& x, const Condition& cond = {});
  Tensor<T> decode(const LatentParts<T>& parts, const Condition& cond = {});
  Tensor<T> log_likelihood(const Tensor<T>& x, const Condition& cond = {});

  /// Draws z ~ N(0, temperature^2) per element and decodes. Each returned
  /// tensor is [C,H,W].
  std::vector<Tensor<T>> sample(std::size_t count, std::optional<std::size_t> label, double temperature,
                                std::uint64_t seed);

  /// Per-item latent part shapes [C,H,W], in part order.
  std::vector<Shape> latent_shapes() const;

  std::vector<Parameter<T>*> parameters();
  std::vector<InvConv1x1<T>*> invconvs();
  /// Every invertible layer in encode order (invconv, coupling, ...).
  std::vector<FlowLayer<T>*> layers();

 private:
  struct Level {
    std::vector<std::unique_ptr<InvConv1x1<T>>> invconvs;
    std::vector<std::unique_ptr<FlowLayer<T>>> couplings;
  };

  Condition resolve(const Condition& cond, std::size_t batch) const;

  ArchitectureConfig config_;
  std::uint64_t seed_;
  std::vector<Level> levels_;
};

/// Standard-normal log-density of one element at zero: -ln(2 pi) / 2.
inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

extern template class FlowModel<float>;
extern template class FlowModel<double>;

}  // namespace bplf
