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

#include "bplf/training.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bplf/checkpoint.hpp"
#include "bplf/runtime.hpp"

namespace bplf {
namespace fs = std::filesystem;

namespace {

const double kLn128 = std::log(128.0);
const double kLn2 = std::log(2.0);

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double bits_per_dim(double log_likelihood, std::size_t dims) {
  if (dims == 0) fail(ErrorKind::kInvalidArgument, "bits_per_dim needs at least one dimension");
  if (!std::isfinite(log_likelihood)) fail(ErrorKind::kNonFinite, "bits_per_dim of a non-finite log-likelihood");
  return -(log_likelihood / static_cast<double>(dims) - kLn128) / kLn2;
}

template <typename T>
Var<T> nll_loss(FlowModel<T>& model, Var<T> batch, const Condition& cond) {
  Var<T> ll = model.log_likelihood(batch, cond);
  const auto values = ll.value().data();
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(static_cast<double>(values[i])))
      throw NonFiniteError(i, "log-likelihood of batch item " + std::to_string(i) + " is not finite");
  return ops::scale(ops::mean(ll), T(-1));
}

template <typename T>
double nll_loss(FlowModel<T>& model, const Tensor<T>& batch, const Condition& cond) {
  Tape<T> tape(false);
  return static_cast<double>(nll_loss(model, tape.constant(batch), cond).value().item());
}

ImageSet image_set(const Dataset& data, std::optional<Split> split) {
  ImageSet out;
  const bool labeled = data.manifest.labeled();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (split && data.manifest.records[i].split != *split) continue;
    out.images.push_back(data.image(i));
    if (labeled) out.labels.push_back(*data.manifest.records[i].label);
  }
  return out;
}

ImageSet apply_svd(const ImageSet& set, const SvdConfig& svd) {
  if (!svd.enabled()) return set;
  ImageSet out;
  out.labels = set.labels;
  for (const auto& img : set.images) {
    const auto bytes = quantize_pixels(svd_truncate(img, svd));
    out.images.emplace_back(img.shape(), std::vector<float>(bytes.begin(), bytes.end()));
  }
  return out;
}

template <typename T>
Tensor<T> make_batch(const ImageSet& set, const std::vector<std::size_t>& order, std::size_t first,
                     std::size_t count, bool train, std::mt19937_64* rng) {
  if (count == 0 || first + count > order.size()) fail(ErrorKind::kInvalidArgument, "batch range out of bounds");
  const Shape item = set.images.at(order[first]).shape();
  const std::size_t per = numel(item);
  std::vector<float> pixels(count * per);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& img = set.images.at(order[first + i]);
    if (img.shape() != item) fail(ErrorKind::kShapeMismatch, "images in a batch differ in shape");
    std::copy(img.data().begin(), img.data().end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  Shape shape{count};
  shape.insert(shape.end(), item.begin(), item.end());
  return to_model_input<T>(Tensor<float>(shape, std::move(pixels)), train, rng);
}

namespace {

template <typename T>
Condition batch_condition(const FlowModel<T>& model, const ImageSet& set, const std::vector<std::size_t>& order,
                          std::size_t first, std::size_t count) {
  if (!model.config().conditional) return {};
  if (!set.labeled()) fail(ErrorKind::kLabel, "a conditional model needs labeled images");
  Condition cond{{}, model.config().num_classes};
  for (std::size_t i = 0; i < count; ++i) cond.labels.push_back(set.labels[order[first + i]]);
  return cond;
}

template <typename T>
void check_shapes(const FlowModel<T>& model, const ImageSet& set, const char* what) {
  const Shape want = model.config().input_shape();
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.images[i].shape() != want)
      fail(ErrorKind::kShapeMismatch, std::string(what) + " image " + std::to_string(i) + " has shape " +
                                          to_string(set.images[i].shape()) + ", model expects " + to_string(want));
}

}  // namespace

template <typename T>
EvalResult evaluate(FlowModel<T>& model, const ImageSet& set, std::size_t batch_size) {
  if (set.size() == 0) fail(ErrorKind::kInvalidArgument, "cannot evaluate on an empty set");
  if (batch_size == 0) fail(ErrorKind::kInvalidArgument, "batch size must be positive");
  check_shapes(model, set, "eval");
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  for (std::size_t first = 0; first < set.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, set.size() - first);
    const Tensor<T> x = make_batch<T>(set, order, first, count, false, nullptr);
    const Tensor<T> ll = model.log_likelihood(x, batch_condition(model, set, order, first, count));
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::isfinite(static_cast<double>(ll[i])))
        throw NonFiniteError(first + i, "log-likelihood of eval image " + std::to_string(first + i) + " is not finite");
      total -= static_cast<double>(ll[i]);
    }
  }
  EvalResult out;
  out.count = set.size();
  out.nll_nats = total / static_cast<double>(set.size());
  out.bits_per_dim = bits_per_dim(-out.nll_nats, model.config().dimensions());
  return out;
}

void TrainConfig::validate() const {
  if (batch_size == 0 || eval_every == 0)
    fail(ErrorKind::kInvalidArgument, "batch size and eval cadence must be positive");
  if (!(learning_rate > 0) || !(clip_norm > 0) || !(adam_epsilon > 0))
    fail(ErrorKind::kInvalidArgument, "learning rate, clip norm and epsilon must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    fail(ErrorKind::kInvalidArgument, "Adam betas must lie in [0, 1)");
}

std::string format_metrics_row(const MetricsRow& row) {
  return std::to_string(row.epoch) + "," + format_double(row.nll_nats) + "," + format_double(row.bits_per_dim) + "," +
         format_double(row.seconds) + "," + format_double(row.lr);
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    fail(ErrorKind::kFormat, path.string() + ": missing metrics header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) fail(ErrorKind::kFormat, path.string() + " line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      rows.push_back({std::stoul(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    } catch (const std::logic_error&) {
      fail(ErrorKind::kFormat, path.string() + " line " + std::to_string(lineno) + ": unparsable number");
    }
  }
  return rows;
}

namespace {

struct AdamState {
  std::vector<Tensor<float>> m, v;
};

struct Snapshot {
  std::vector<Tensor<float>> values;
  AdamState adam;
  std::size_t step = 0;
};

Snapshot take_snapshot(const std::vector<Parameter<float>*>& params, const AdamState& adam, std::size_t step) {
  Snapshot s{{}, adam, step};
  for (auto* p : params) s.values.push_back(p->value);
  return s;
}

void restore(const Snapshot& s, const std::vector<Parameter<float>*>& params, AdamState& adam, std::size_t& step) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.values[i];
  adam = s.adam;
  step = s.step;
}

/// Global gradient norm, or NaN when any gradient is not finite.
double grad_norm(const std::vector<Parameter<float>*>& params) {
  double sq = 0.0;
  for (auto* p : params)
    for (float g : p->grad.data()) sq += static_cast<double>(g) * g;
  return std::sqrt(sq);
}

void adam_update(const std::vector<Parameter<float>*>& params, AdamState& adam, std::size_t step, double lr,
                 double grad_scale, const TrainConfig& cfg) {
  const double t = static_cast<double>(step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k]->value.data();
    auto grad = params[k]->grad.data();
    auto m = adam.m[k].data();
    auto v = adam.v[k].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i] * grad_scale;
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      value[i] = static_cast<float>(value[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_epsilon));
    }
  }
}

bool invconvs_invertible(FlowModel<float>& model) {
  for (auto* inv : model.invconvs())
    if (!(inv->abs_det() >= InvConv1x1<float>::kMinAbsDet)) return false;
  return true;
}

}  // namespace

TrainResult train(FlowModel<float>& model, const ImageSet& train_raw, const ImageSet& eval_raw,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_raw.size() == 0) fail(ErrorKind::kInvalidArgument, "training set is empty");
  const auto& arch = model.config();
  const ImageSet train_set = apply_svd(train_raw, arch.svd);
  const ImageSet eval_set = eval_raw.size() ? apply_svd(eval_raw, arch.svd) : train_set;
  check_shapes(model, train_set, "training");
  check_shapes(model, eval_set, "eval");
  if (arch.conditional && (!train_set.labeled() || !eval_set.labeled()))
    fail(ErrorKind::kLabel, "a conditional model needs labeled training and eval data");

  std::vector<std::string> class_names = cfg.class_names;
  if (class_names.empty() && arch.conditional)
    for (std::size_t k = 0; k < arch.num_classes; ++k) class_names.push_back(std::to_string(k));

  std::ofstream metrics;
  if (cfg.out_dir) {
    fs::create_directories(*cfg.out_dir);
    metrics.open(*cfg.out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) fail(ErrorKind::kIo, "cannot write " + (*cfg.out_dir / "metrics.csv").string());
    metrics << kMetricsHeader << "\n" << std::flush;
  }

  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  auto record = [&](std::size_t epoch, double lr) {
    const EvalResult ev = evaluate(model, eval_set, cfg.batch_size);
    MetricsRow row{epoch, ev.nll_nats, ev.bits_per_dim,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), lr};
    result.metrics.push_back(row);
    if (metrics.is_open()) metrics << format_metrics_row(row) << "\n" << std::flush;
    if (ev.bits_per_dim < result.best_bits_per_dim) {
      result.best_bits_per_dim = ev.bits_per_dim;
      if (cfg.out_dir) save_checkpoint(model, *cfg.out_dir / "best", class_names, epoch);
    }
    if (cfg.on_epoch) cfg.on_epoch(row);
  };

  record(0, 0.0);

  const auto params = model.parameters();
  AdamState adam;
  for (auto* p : params) {
    adam.m.emplace_back(p->value.shape());
    adam.v.emplace_back(p->value.shape());
  }
  std::mt19937_64 rng(derive_seed(cfg.seed, "train"));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  double lr_scale = 1.0;
  double last_lr = 0.0;
  Snapshot previous = take_snapshot(params, adam, step);

  auto scheduled_lr = [&] {
    const double warm = cfg.warmup_steps ? std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps) : 1.0;
    return cfg.learning_rate * lr_scale * warm;
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t batch_index = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size, ++batch_index) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      const Tensor<float> xb = make_batch<float>(train_set, order, first, count, true, &rng);
      const Condition cond = batch_condition(model, train_set, order, first, count);

      // Forward/backward; on a non-finite loss or gradient undo the previous
      // update, halve the step size and try once more.
      double norm = 0.0;
      for (int attempt = 0;; ++attempt) {
        for (auto* p : params) p->zero_grad();
        bool finite = true;
        std::string why;
        try {
          Tape<float> tape;
          Var<float> loss = nll_loss(model, tape.constant(xb), cond);
          if (!std::isfinite(loss.value().item())) throw NonFiniteError(0, "batch loss is not finite");
          tape.backward(loss);
          norm = grad_norm(params);
          if (!std::isfinite(norm)) {
            finite = false;
            why = "gradient norm is not finite";
          }
        } catch (const NonFiniteError& e) {
          finite = false;
          why = e.what();
        }
        if (finite) break;
        if (attempt > 0)
          throw NonFiniteError(batch_index, "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                                std::to_string(batch_index) + ", step " + std::to_string(step) +
                                                " after halving the learning rate to " +
                                                format_double(scheduled_lr()) + ": " + why);
        restore(previous, params, adam, step);
        lr_scale *= 0.5;
        ++result.lr_halvings;
      }

      const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
      Snapshot before = take_snapshot(params, adam, step);
      for (int attempt = 0;; ++attempt) {
        last_lr = scheduled_lr();
        adam_update(params, adam, step, last_lr, clip, cfg);
        if (invconvs_invertible(model)) break;
        if (attempt >= 20)
          fail(ErrorKind::kSingularMatrix, "1x1 convolution became singular at epoch " + std::to_string(epoch) +
                                               ", batch " + std::to_string(batch_index) +
                                               " and halving the step did not help");
        restore(before, params, adam, step);
        lr_scale *= 0.5;
        ++result.lr_halvings;
      }
      previous = std::move(before);
      ++step;
    }
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) record(epoch, last_lr);
  }
  result.steps = step;
  if (cfg.out_dir) save_checkpoint(model, *cfg.out_dir, class_names, cfg.epochs);
  return result;
}

double numerical_logdet(const VectorMap& f, const Tensor<double>& x, double eps) {
  const std::size_t d = x.size();
  if (d > kMaxOracleDims)
    fail(ErrorKind::kInvalidArgument, "numerical_logdet supports at most " + std::to_string(kMaxOracleDims) +
                                          " dimensions, got " + std::to_string(d));
  if (!(eps > 0)) fail(ErrorKind::kInvalidArgument, "finite-difference step must be positive");
  Eigen::MatrixXd jac(d, d);
  Tensor<double> probe = x;
  for (std::size_t j = 0; j < d; ++j) {
    const double orig = probe[j];
    probe[j] = orig + eps;
    const Tensor<double> plus = f(probe);
    probe[j] = orig - eps;
    const Tensor<double> minus = f(probe);
    probe[j] = orig;
    if (plus.size() != d || minus.size() != d)
      fail(ErrorKind::kShapeMismatch, "numerical_logdet needs a map from R^" + std::to_string(d) + " to itself");
    for (std::size_t i = 0; i < d; ++i) jac(i, j) = (plus[i] - minus[i]) / (2 * eps);
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
  const auto& u = lu.matrixLU();
  const double scale = std::max(1.0, jac.cwiseAbs().maxCoeff());
  double out = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double pivot = std::abs(u(i, i));
    if (!(pivot > 1e-12 * scale)) fail(ErrorKind::kSingularMatrix, "numerical Jacobian is singular");
    out += std::log(pivot);
  }
  return out;
}

std::string ablation_cell_id(const AblationCell& cell) {
  std::string id = to_string(cell.coupling) + "_" + to_string(cell.conv) + "_svd-" + cell.svd.describe();
  for (auto& c : id)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_') c = '-';
  return id;
}

std::vector<AblationResult> ablation_harness(const std::vector<AblationCell>& grid, const ArchitectureConfig& base,
                                             const ImageSet& train_set, const ImageSet& eval_set,
                                             const TrainConfig& config) {
  std::vector<AblationResult> out;
  for (const auto& cell : grid) {
    AblationResult r;
    r.cell = cell;
    r.epochs = config.epochs;
    try {
      ArchitectureConfig arch = base;
      arch.coupling = cell.coupling;
      arch.conv = cell.conv;
      arch.svd = cell.svd;
      FlowModel<float> model(arch, config.seed);
      TrainConfig cfg = config;
      if (config.out_dir) cfg.out_dir = *config.out_dir / ablation_cell_id(cell);
      const TrainResult tr = train(model, train_set, eval_set, cfg);
      r.curve = tr.metrics;
      r.final_bits_per_dim = tr.metrics.back().bits_per_dim;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_ablation_csv(const std::vector<AblationResult>& results, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << kAblationHeader << "\n";
  for (const auto& r : results)
    out << to_string(r.cell.coupling) << "," << to_string(r.cell.conv) << "," << r.cell.svd.describe() << ","
        << (r.final_bits_per_dim ? format_double(*r.final_bits_per_dim) : std::string("failed")) << "," << r.epochs
        << "\n";
}

std::vector<AblationResult> read_ablation_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kAblationHeader)
    fail(ErrorKind::kFormat, path.string() + ": missing ablation header");
  std::vector<AblationResult> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) fail(ErrorKind::kFormat, path.string() + " line " + std::to_string(lineno) + ": expected 5 fields");
    AblationResult r;
    r.cell = {parse_coupling_kind(f[0]), parse_conv_kind(f[1]), SvdConfig::parse_unchecked(f[2])};
    try {
      if (f[3] != "failed") r.final_bits_per_dim = std::stod(f[3]);
      r.epochs = std::stoul(f[4]);
    } catch (const std::logic_error&) {
      fail(ErrorKind::kFormat, path.string() + " line " + std::to_string(lineno) + ": unparsable number");
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_ablation_curves(const std::vector<AblationResult>& results, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << "coupling,conv,svd,epoch,nll_nats,bits_per_dim\n";
  for (const auto& r : results)
    for (const auto& row : r.curve)
      out << to_string(r.cell.coupling) << "," << to_string(r.cell.conv) << "," << r.cell.svd.describe() << ","
          << row.epoch << "," << format_double(row.nll_nats) << "," << format_double(row.bits_per_dim) << "\n";
}

template Var<float> nll_loss(FlowModel<float>&, Var<float>, const Condition&);
template Var<double> nll_loss(FlowModel<double>&, Var<double>, const Condition&);
template double nll_loss(FlowModel<float>&, const Tensor<float>&, const Condition&);
template double nll_loss(FlowModel<double>&, const Tensor<double>&, const Condition&);
template Tensor<float> make_batch<float>(const ImageSet&, const std::vector<std::size_t>&, std::size_t, std::size_t,
                                         bool, std::mt19937_64*);
template Tensor<double> make_batch<double>(const ImageSet&, const std::vector<std::size_t>&, std::size_t,
                                           std::size_t, bool, std::mt19937_64*);
template EvalResult evaluate(FlowModel<float>&, const ImageSet&, std::size_t);
template EvalResult evaluate(FlowModel<double>&, const ImageSet&, std::size_t);

}  // namespace bplf
