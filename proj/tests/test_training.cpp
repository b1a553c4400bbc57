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

#include <sstream>

#include "bplf/training.hpp"
#include "test_util.hpp"

using namespace bplf;
using bplf::testing::error_kind_of;
using bplf::testing::random_tensor;
using bplf::testing::slurp;
using bplf::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// Smooth 8x8 blobs with random centre and brightness, integer pixels.
ImageSet blob_set(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageSet set;
  for (std::size_t n = 0; n < count; ++n) {
    const double cy = 2 + 4 * u(rng), cx = 2 + 4 * u(rng), peak = 120 + 130 * u(rng);
    Tensor<float> img({1, 8, 8});
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        img[y * 8 + x] = static_cast<float>(std::round(peak * std::exp(-d2 / 6.0)));
      }
    set.images.push_back(img);
    set.labels.push_back(n % 2);
  }
  return set;
}

ArchitectureConfig tiny_arch() {
  ArchitectureConfig a;
  a.levels = 1;
  a.depth = 1;
  a.hidden = 8;
  a.height = a.width = 8;
  return a;
}

std::vector<std::string> csv_without_seconds(const fs::path& path) {
  std::vector<std::string> rows;
  std::istringstream in(slurp(path));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    REQUIRE(cols.size() == 5);
    rows.push_back(cols[0] + "," + cols[1] + "," + cols[2] + "," + cols[4]);
  }
  return rows;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("bits per dimension") {
    CHECK(bits_per_dim(std::log(128.0), 1) == 0.0);
    CHECK(bits_per_dim(0.0, 1) == 7.0);
    // -(-3.675754 / 4 - ln 128) / ln 2
    CHECK(bits_per_dim(-3.675754, 4) == doctest::Approx(8.3258).epsilon(1e-5));
    for (std::size_t d : {1u, 16u, 3072u}) CHECK(std::abs(bits_per_dim(std::log(128.0) * d, d)) < 1e-12);
    CHECK(error_kind_of([] { bits_per_dim(1.0, 0); }) == ErrorKind::kInvalidArgument);
  }

  TEST_CASE("nll loss of the identity flow at the origin") {
    auto a = tiny_arch();
    a.coupling = CouplingKind::kAdditive;
    a.height = a.width = 2;
    FlowModel<double> model(a, 1);
    model.invconvs()[0]->weight().value = Tensor<double>::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    CHECK(nll_loss(model, Tensor<double>({1, 1, 2, 2})) == doctest::Approx(3.675754).epsilon(1e-6));

    const auto x = random_tensor<double>({1, 1, 2, 2}, 4);
    Tensor<double> pair({2, 1, 2, 2});
    std::copy(x.data().begin(), x.data().end(), pair.data().begin());
    std::copy(x.data().begin(), x.data().end(), pair.data().begin() + 4);
    CHECK(nll_loss(model, pair) == doctest::Approx(nll_loss(model, x)).epsilon(1e-14));
  }

  TEST_CASE("non-finite items are reported by index") {
    FlowModel<double> model(tiny_arch(), 1);
    auto batch = random_tensor<double>({3, 1, 8, 8}, 2);
    batch[64 * 2 + 5] = std::numeric_limits<double>::quiet_NaN();
    try {
      nll_loss(model, batch);
      FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
      CHECK(e.index() == 2);
      CHECK(e.kind() == ErrorKind::kNonFinite);
    }
  }

  TEST_CASE("numerical log-det examples") {
    const auto x = random_tensor<double>({16}, 1);
    CHECK(std::abs(numerical_logdet([](const Tensor<double>& v) { return v; }, x)) < 1e-9);
    auto doubled = [](const Tensor<double>& v) {
      Tensor<double> y = v;
      for (auto& e : y.data()) e *= 2;
      return y;
    };
    CHECK(numerical_logdet(doubled, x) == doctest::Approx(16 * std::log(2.0)).epsilon(1e-9));
    auto collapse = [](const Tensor<double>& v) {
      Tensor<double> y = v;
      y[3] = y[2];
      return y;
    };
    CHECK(error_kind_of([&] { numerical_logdet(collapse, x); }) == ErrorKind::kSingularMatrix);
    CHECK(error_kind_of([&] { numerical_logdet(doubled, Tensor<double>({kMaxOracleDims + 1})); }) ==
          ErrorKind::kInvalidArgument);
  }

  TEST_CASE("single-batch overfit") {
    const auto set = blob_set(8, 3);
    FlowModel<float> model(tiny_arch(), 4);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 8;
    cfg.seed = 5;
    const auto result = train(model, set, set, cfg);
    REQUIRE(result.metrics.size() == 21);
    CHECK(result.steps == 20);
    int non_monotone = 0;
    for (std::size_t i = 1; i < result.metrics.size(); ++i)
      non_monotone += !(result.metrics[i].nll_nats < result.metrics[i - 1].nll_nats);
    CHECK(non_monotone <= 2);
    CHECK(result.metrics.back().nll_nats < result.metrics.front().nll_nats);
  }

  TEST_CASE("short run writes checkpoints and consistent, reproducible metrics") {
    TempDir a("train_a"), b("train_b");
    const auto train_set = blob_set(64, 6), eval_set = blob_set(16, 7);
    auto run = [&](const fs::path& out) {
      FlowModel<float> model(tiny_arch(), 8);
      TrainConfig cfg;
      cfg.epochs = 2;
      cfg.batch_size = 16;
      cfg.seed = 9;
      cfg.out_dir = out;
      return train(model, train_set, eval_set, cfg);
    };
    const auto ra = run(a.path());
    run(b.path());
    for (const char* f : {"manifest.json", "weights.bin", "metrics.csv"}) CHECK(fs::exists(a / f));
    CHECK(fs::exists(a / "best" / "manifest.json"));

    const auto rows = read_metrics_csv(a / "metrics.csv");
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].epoch == 0);
    CHECK(rows[2].epoch == 2);
    for (const auto& r : rows) {
      CHECK(std::abs(r.bits_per_dim - bits_per_dim(-r.nll_nats, 64)) < 1e-9);
      CHECK(r.bits_per_dim == ra.metrics[r.epoch].bits_per_dim);
    }
    CHECK(slurp(a / "metrics.csv").rfind(kMetricsHeader, 0) == 0);
    CHECK(csv_without_seconds(a / "metrics.csv") == csv_without_seconds(b / "metrics.csv"));
    CHECK(slurp(a / "weights.bin") == slurp(b / "weights.bin"));
  }

  TEST_CASE("invalid training configuration") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK(error_kind_of([&] { cfg.validate(); }) == ErrorKind::kInvalidArgument);
    cfg = TrainConfig{};
    cfg.learning_rate = -1;
    CHECK(error_kind_of([&] { cfg.validate(); }) == ErrorKind::kInvalidArgument);
  }

  TEST_CASE("ablation grid plumbing") {
    TempDir dir("ablation");
    const auto train_set = blob_set(32, 10), eval_set = blob_set(8, 11);
    std::vector<AblationCell> grid;
    for (ConvKind conv : {ConvKind::k3x3, ConvKind::k3x3And1x1})
      for (SvdConfig svd : {SvdConfig::with_energy(0.95), SvdConfig::off()})
        grid.push_back({CouplingKind::kBplf, conv, svd});
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.seed = 12;
    cfg.out_dir = dir.path();
    const auto results = ablation_harness(grid, tiny_arch(), train_set, eval_set, cfg);
    REQUIRE(results.size() == 4);
    for (const auto& r : results) {
      CAPTURE(r.error);
      CHECK(r.final_bits_per_dim.has_value());
      CHECK(r.curve.size() == 2);
      CHECK(fs::exists(dir / ablation_cell_id(r.cell) / "metrics.csv"));
    }
    // Zero-initialized couplings make both SVD-off cells start identically.
    CHECK(results[1].curve[0].bits_per_dim == results[3].curve[0].bits_per_dim);

    write_ablation_csv(results, dir / "grid.csv");
    CHECK(slurp(dir / "grid.csv").rfind(kAblationHeader, 0) == 0);
    const auto back = read_ablation_csv(dir / "grid.csv");
    REQUIRE(back.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(back[i].cell.conv == results[i].cell.conv);
      CHECK(back[i].cell.svd == results[i].cell.svd);
      CHECK(back[i].final_bits_per_dim == results[i].final_bits_per_dim);
      CHECK(back[i].epochs == 1);
    }
  }

  TEST_CASE("a failing ablation cell is marked and the grid continues") {
    TempDir dir("ablation_fail");
    const auto train_set = blob_set(16, 13);
    std::vector<AblationCell> grid{{CouplingKind::kBplf, ConvKind::k3x3, SvdConfig::with_rank(0)},
                                   {CouplingKind::kAffine, ConvKind::k3x3, SvdConfig::off()}};
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    const auto results = ablation_harness(grid, tiny_arch(), train_set, {}, cfg);
    REQUIRE(results.size() == 2);
    CHECK(!results[0].final_bits_per_dim);
    CHECK(!results[0].error.empty());
    CHECK(results[1].final_bits_per_dim.has_value());
    write_ablation_csv(results, dir / "grid.csv");
    CHECK(slurp(dir / "grid.csv").find("failed") != std::string::npos);
    CHECK(!read_ablation_csv(dir / "grid.csv")[0].final_bits_per_dim);
  }
}
