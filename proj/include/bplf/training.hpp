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

// Maximum-likelihood training, evaluation in bits/dim, the finite-difference
// log-determinant oracle and the ablation grid runner.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bplf/data.hpp"
#include "bplf/flow_model.hpp"

namespace bplf {

/// Raised when a per-item log-likelihood or a batch loss is not finite.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::size_t index, const std::string& message)
      : Error(ErrorKind::kNonFinite, message), index_(index) {}
  /// Item index within the batch for nll_loss; batch index within the epoch
  /// when raised by `train`.
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// -(LL / dims - ln 128) / ln 2 for a per-item log-likelihood in nats.
double bits_per_dim(double log_likelihood, std::size_t dims);

/// Mean over the batch of -log p(x). Throws NonFiniteError naming the first
/// offending item.
template <typename T>
Var<T> nll_loss(FlowModel<T>& model, Var<T> batch, const Condition& cond = {});
template <typename T>
double nll_loss(FlowModel<T>& model, const Tensor<T>& batch, const Condition& cond = {});

/// Pixel images ([C,S,S], values 0..255) with optional labels.
struct ImageSet {
  std::vector<Tensor<float>> images;
  std::vector<std::size_t> labels;  // empty or one per image

  std::size_t size() const { return images.size(); }
  bool labeled() const { return !images.empty() && labels.size() == images.size(); }
};

ImageSet image_set(const Dataset& data, std::optional<Split> split = std::nullopt);
/// Low-rank truncation per image followed by rounding back to pixel values.
ImageSet apply_svd(const ImageSet& set, const SvdConfig& svd);

/// Stacks images [first, first+count) of the given order into [N,C,H,W].
template <typename T>
Tensor<T> make_batch(const ImageSet& set, const std::vector<std::size_t>& order, std::size_t first,
                     std::size_t count, bool train, std::mt19937_64* rng);

struct EvalResult {
  double nll_nats = 0.0;  // mean per image
  double bits_per_dim = 0.0;
  std::size_t count = 0;
};

/// Eval-mode dequantization, mean NLL over the whole set.
template <typename T>
EvalResult evaluate(FlowModel<T>& model, const ImageSet& set, std::size_t batch_size = 64);

struct MetricsRow {
  std::size_t epoch = 0;
  double nll_nats = 0.0;
  double bits_per_dim = 0.0;
  double seconds = 0.0;
  double lr = 0.0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t warmup_steps = 500;
  double clip_norm = 50.0;
  std::uint64_t seed = 0;
  /// Checkpoint, best checkpoint (out_dir/best) and metrics.csv go here when set.
  std::optional<std::filesystem::path> out_dir;
  std::size_t eval_every = 1;
  std::vector<std::string> class_names;
  /// Called after each metrics row.
  std::function<void(const MetricsRow&)> on_epoch;

  void validate() const;
};

inline constexpr const char* kMetricsHeader = "epoch,nll_nats,bits_per_dim,seconds,lr";

std::string format_metrics_row(const MetricsRow& row);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct TrainResult {
  std::vector<MetricsRow> metrics;  // row 0 is the untrained model
  std::size_t steps = 0;
  std::size_t lr_halvings = 0;
  double best_bits_per_dim = INFINITY;
};

/// Trains `model` in place. The SVD setting of the model's architecture is
/// applied to both sets first. An empty eval set evaluates on the train set.
TrainResult train(FlowModel<float>& model, const ImageSet& train_set, const ImageSet& eval_set,
                  const TrainConfig& config);

/// log|det J| of `f` at `x`, with J assembled by central differences.
/// Throws kSingularMatrix when J is numerically singular.
using VectorMap = std::function<Tensor<double>(const Tensor<double>&)>;
inline constexpr std::size_t kMaxOracleDims = 256;
double numerical_logdet(const VectorMap& f, const Tensor<double>& x, double eps = 1e-5);

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
  CouplingKind coupling = CouplingKind::kBplf;
  ConvKind conv = ConvKind::k3x3;
  SvdConfig svd;
};

struct AblationResult {
  AblationCell cell;
  std::optional<double> final_bits_per_dim;  // empty when the cell failed
  std::size_t epochs = 0;
  std::vector<MetricsRow> curve;
  std::string error;
};

inline constexpr const char* kAblationHeader = "coupling,conv,svd,final_bits_per_dim,epochs";

/// Trains every cell from the same seed and budget. A failing cell is
/// recorded and the grid continues. Per-cell outputs go to out_dir/<cell>.
std::vector<AblationResult> ablation_harness(const std::vector<AblationCell>& grid, const ArchitectureConfig& base,
                                             const ImageSet& train_set, const ImageSet& eval_set,
                                             const TrainConfig& config);

std::string ablation_cell_id(const AblationCell& cell);
void write_ablation_csv(const std::vector<AblationResult>& results, const std::filesystem::path& path);
std::vector<AblationResult> read_ablation_csv(const std::filesystem::path& path);
/// "coupling,conv,svd,epoch,nll_nats,bits_per_dim" rows for every cell.
void write_ablation_curves(const std::vector<AblationResult>& results, const std::filesystem::path& path);

}  // namespace bplf
