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

// bplf: train, sample, eval, check and data-build.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
// failure.

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>

#include "bplf/checkpoint.hpp"
#include "bplf/data.hpp"
#include "bplf/runtime.hpp"
#include "bplf/training.hpp"
#include "bplf/verify.hpp"

namespace fs = std::filesystem;
using namespace bplf;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerification = 3;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// "none" maps to no label. Otherwise the name must match a class name
/// (case-insensitive) or, for the emotion taxonomy, an emotion alias.
std::optional<std::size_t> resolve_label(const std::string& name, const std::vector<std::string>& classes) {
  if (lower(name) == "none") return std::nullopt;
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (lower(classes[i]) == lower(name)) return i;
  if (classes == emotion_class_names())
    if (auto e = emotion_from_name(name)) return *e;
  std::string known;
  for (const auto& c : classes) known += (known.empty() ? "" : ", ") + c;
  fail(ErrorKind::kLabel, "unknown label '" + name + "'" + (known.empty() ? "" : "; known labels: " + known));
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string dataset, coupling = "bplf", conv = "3x3", svd = "off", out, eval_split = "val";
  std::size_t levels = 3, depth = 8, hidden = 64, epochs = 30, batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool conditional = false;
};

int cmd_train(const TrainArgs& a) {
  const Dataset data = load_dataset(a.dataset);
  ArchitectureConfig arch;
  arch.levels = a.levels;
  arch.depth = a.depth;
  arch.hidden = a.hidden;
  arch.coupling = parse_coupling_kind(a.coupling);
  arch.conv = parse_conv_kind(a.conv);
  arch.svd = SvdConfig::parse(a.svd);
  arch.conditional = a.conditional;
  arch.channels = data.manifest.channels;
  arch.height = arch.width = data.manifest.side;
  arch.num_classes = std::max<std::size_t>(1, data.manifest.class_names.size());
  arch.validate();
  if (a.conditional && !data.manifest.labeled())
    fail(ErrorKind::kInvalidArgument, "--conditional needs a dataset where every record is labeled");

  ImageSet train_set = image_set(data, Split::kTrain);
  if (train_set.size() == 0) fail(ErrorKind::kInvalidArgument, "dataset has no training records");
  ImageSet eval_set = image_set(data, parse_split(a.eval_split));
  if (eval_set.size() == 0 && parse_split(a.eval_split) == Split::kVal) eval_set = image_set(data, Split::kTest);

  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.learning_rate = a.lr;
  cfg.seed = a.seed;
  cfg.out_dir = a.out;
  cfg.class_names = data.manifest.class_names;
  cfg.on_epoch = [](const MetricsRow& r) {
    std::printf("epoch %zu  nll %.4f nats  %.4f bits/dim  %.1fs\n", r.epoch, r.nll_nats, r.bits_per_dim, r.seconds);
    std::fflush(stdout);
  };
  FlowModel<float> model(arch, a.seed);
  const TrainResult result = train(model, train_set, eval_set, cfg);
  std::printf("best %.4f bits/dim after %zu steps; checkpoint in %s\n", result.best_bits_per_dim, result.steps,
              a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string checkpoint, label = "none", out;
  std::size_t count = 9;
  double temperature = 0.7;
  std::uint64_t seed = 0;
  bool grid = false;
};

int cmd_sample(const SampleArgs& a) {
  const Checkpoint ckpt = read_checkpoint(a.checkpoint);
  auto model = model_from_checkpoint<float>(ckpt);
  const auto label = resolve_label(a.label, ckpt.class_names);
  if (label && !ckpt.arch.conditional)
    fail(ErrorKind::kLabel, "checkpoint is unconditional; use --label none");
  if (!label && ckpt.arch.conditional) fail(ErrorKind::kLabel, "checkpoint is conditional; pass --label");
  if (ckpt.arch.channels != 1) fail(ErrorKind::kInvalidArgument, "PGM output needs single-channel models");

  const auto samples = model->sample(a.count, label, a.temperature, a.seed);
  const std::string tag = label ? lower(ckpt.class_names.at(*label)) : "none";
  const std::size_t h = ckpt.arch.height, w = ckpt.arch.width;
  fs::create_directories(a.out);
  std::vector<std::vector<std::uint8_t>> images;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    images.push_back(to_image(samples[i]));
    write_pgm(fs::path(a.out) / ("sample_" + tag + "_" + std::to_string(i) + ".pgm"), w, h, images.back());
  }
  if (a.grid && !images.empty()) {
    const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(images.size()))));
    const std::size_t rows = (images.size() + cols - 1) / cols;
    std::vector<std::uint8_t> tile(rows * h * cols * w, 0);
    for (std::size_t i = 0; i < images.size(); ++i)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(images[i].begin() + static_cast<std::ptrdiff_t>(y * w), w,
                    tile.begin() + static_cast<std::ptrdiff_t>(((i / cols) * h + y) * cols * w + (i % cols) * w));
    write_pgm(fs::path(a.out) / ("grid_" + tag + ".pgm"), cols * w, rows * h, tile);
  }
  std::printf("wrote %zu samples to %s\n", images.size(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& split, std::size_t batch) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  auto model = model_from_checkpoint<float>(ckpt);
  const Dataset data = load_dataset(dataset);
  const Shape want = ckpt.arch.input_shape();
  const Shape have{data.manifest.channels, data.manifest.side, data.manifest.side};
  if (want != have)
    fail(ErrorKind::kShapeMismatch, "checkpoint expects images " + to_string(want) + ", dataset has " + to_string(have));
  const ImageSet set = apply_svd(image_set(data, parse_split(split)), ckpt.arch.svd);
  if (set.size() == 0) fail(ErrorKind::kInvalidArgument, "split '" + split + "' is empty");
  const EvalResult r = evaluate(*model, set, batch);
  std::printf("images %zu\nnll_nats %s\nbits_per_dim %s\n", r.count, fmt(r.nll_nats).c_str(),
              fmt(r.bits_per_dim).c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_check(bool deep, std::uint64_t seed, const std::string& fault) {
  if (!fault.empty()) set_injected_fault(parse_fault(fault));
  bool ok = true;
  for (const auto& r : run_checks(seed, deep)) {
    std::printf("%s  %-17s %s [seed %llu, %.1fs]\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(),
                static_cast<unsigned long long>(r.seed), r.seconds);
    ok = ok && r.passed;
  }
  std::fflush(stdout);
  return ok ? 0 : kExitVerification;
}

// ---------------------------------------------------------------------------

struct DataBuildArgs {
  std::vector<std::string> sources;
  std::string out, svd = "off", classes = "emotion";
  std::size_t size = 48, limit = 0;
  bool dedupe = false;
  std::uint64_t seed = 0;
  double val_fraction = 0.0, test_fraction = 0.0;
};

std::vector<LabeledImage> read_source(const std::string& locator) {
  const auto colon = locator.find(':');
  if (colon == std::string::npos)
    fail(ErrorKind::kInvalidArgument, "source '" + locator + "' must look like kind:path (kind is idx, csv or folder)");
  const std::string kind = lower(locator.substr(0, colon));
  const std::string path = locator.substr(colon + 1);
  if (kind == "idx") {
    // idx:IMAGES[,LABELS]
    const auto comma = path.find(',');
    if (comma == std::string::npos) return read_idx_dataset(path, std::nullopt, "idx");
    return read_idx_dataset(path.substr(0, comma), fs::path(path.substr(comma + 1)), "idx");
  }
  if (kind == "csv") return read_pixel_csv(path, "csv");
  if (kind == "folder") return read_image_folder(path, "folder");
  fail(ErrorKind::kInvalidArgument, "unknown source format '" + kind + "' (expected idx, csv or folder)");
}

int cmd_data_build(const DataBuildArgs& a) {
  PreprocessConfig cfg;
  cfg.side = a.size;
  cfg.svd = SvdConfig::parse(a.svd);
  cfg.dedupe = a.dedupe;
  cfg.seed = a.seed;
  cfg.val_fraction = a.val_fraction;
  cfg.test_fraction = a.test_fraction;
  if (a.classes == "emotion") {
    cfg.class_names = emotion_class_names();
  } else if (a.classes == "digits") {
    cfg.class_names = digit_class_names();
  } else {
    fail(ErrorKind::kInvalidArgument, "--classes must be emotion or digits");
  }
  std::vector<LabeledImage> images;
  for (const auto& s : a.sources) {
    auto part = read_source(s);
    if (a.limit && part.size() > a.limit) part.resize(a.limit);
    std::move(part.begin(), part.end(), std::back_inserter(images));
  }
  const Dataset data = preprocess(images, cfg);
  const fs::path manifest = fs::path(a.out) / "manifest.json";
  save_dataset(data, manifest);
  std::printf("%s", format_count_table(data.manifest).c_str());
  const auto splits = data.manifest.split_counts();
  std::printf("splits: train %zu, val %zu, test %zu\nmanifest %s\nchecksum %s\n", splits.at(Split::kTrain),
              splits.at(Split::kVal), splits.at(Split::kTest), manifest.string().c_str(),
              data.manifest.checksum.c_str());
  return 0;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kLabel:
      return kExitUsage;
    default:
      return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  set_worker_threads(worker_threads());

  CLI::App app{"Bi-parallel linear flow: train, sample, evaluate and verify flow models"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a flow on a preprocessed dataset");
  train_cmd->add_option("--dataset", ta.dataset, "Dataset manifest.json")->required();
  train_cmd->add_option("--coupling", ta.coupling, "additive, affine or bplf")->capture_default_str();
  train_cmd->add_option("--conv", ta.conv, "3x3 or 3x3+1x1")->capture_default_str();
  train_cmd->add_option("--levels", ta.levels)->capture_default_str();
  train_cmd->add_option("--depth", ta.depth, "Flow steps per level")->capture_default_str();
  train_cmd->add_option("--hidden", ta.hidden, "Coupling network width")->capture_default_str();
  train_cmd->add_option("--svd-energy", ta.svd, "Energy fraction kept by the SVD stage, or off")->capture_default_str();
  train_cmd->add_flag("--conditional", ta.conditional, "Condition on labels");
  train_cmd->add_option("--epochs", ta.epochs)->capture_default_str();
  train_cmd->add_option("--batch", ta.batch)->capture_default_str();
  train_cmd->add_option("--lr", ta.lr)->capture_default_str();
  train_cmd->add_option("--seed", ta.seed)->capture_default_str();
  train_cmd->add_option("--eval-split", ta.eval_split, "train, val or test")->capture_default_str();
  train_cmd->add_option("--out", ta.out, "Output directory")->required();

  SampleArgs sa;
  auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint as PGM files");
  sample_cmd->add_option("--checkpoint", sa.checkpoint)->required();
  sample_cmd->add_option("--count", sa.count)->capture_default_str();
  sample_cmd->add_option("--temperature", sa.temperature)->capture_default_str();
  sample_cmd->add_option("--label", sa.label, "Class name, or none")->capture_default_str();
  sample_cmd->add_option("--seed", sa.seed)->capture_default_str();
  sample_cmd->add_option("--out", sa.out)->required();
  sample_cmd->add_flag("--grid", sa.grid, "Also write a tiled grid image");

  std::string ec, ed, es = "test";
  std::size_t eb = 64;
  auto* eval_cmd = app.add_subcommand("eval", "Report NLL and bits/dim on a dataset split");
  eval_cmd->add_option("--checkpoint", ec)->required();
  eval_cmd->add_option("--dataset", ed)->required();
  eval_cmd->add_option("--split", es)->capture_default_str();
  eval_cmd->add_option("--batch", eb)->capture_default_str();

  bool deep = false;
  std::uint64_t check_seed = 0;
  std::string fault;
  auto* check_cmd = app.add_subcommand("check", "Run the self-verification suites");
  check_cmd->add_flag("--deep", deep, "Add the finite-difference Jacobian suite");
  check_cmd->add_option("--seed", check_seed)->capture_default_str();
  check_cmd->add_option("--inject-fault", fault)->group("");

  DataBuildArgs da;
  auto* data_cmd = app.add_subcommand("data-build", "Assemble a dataset manifest and pixel store");
  data_cmd->add_option("--source", da.sources, "kind:path with kind idx (IMAGES[,LABELS]), csv or folder")
      ->required();
  data_cmd->add_option("--size", da.size, "Output side length")->capture_default_str();
  data_cmd->add_flag("--dedupe", da.dedupe, "Drop exact duplicate images");
  data_cmd->add_option("--svd-energy", da.svd, "Energy fraction kept, or off")->capture_default_str();
  data_cmd->add_option("--classes", da.classes, "emotion or digits")->capture_default_str();
  data_cmd->add_option("--limit", da.limit, "Keep at most this many images per source (0: all)");
  data_cmd->add_option("--val-fraction", da.val_fraction)->capture_default_str();
  data_cmd->add_option("--test-fraction", da.test_fraction)->capture_default_str();
  data_cmd->add_option("--seed", da.seed)->capture_default_str();
  data_cmd->add_option("--out", da.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*sample_cmd) return cmd_sample(sa);
    if (*eval_cmd) return cmd_eval(ec, ed, es, eb);
    if (*check_cmd) return cmd_check(deep, check_seed, fault);
    if (*data_cmd) return cmd_data_build(da);
  } catch (const Error& e) {
    std::cerr << "bplf: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "bplf: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
