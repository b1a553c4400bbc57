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

#include <Eigen/SVD>

#include "bplf/svd.hpp"
#include "test_util.hpp"

using namespace bplf;
using bplf::testing::error_kind_of;
using bplf::testing::max_diff;
using bplf::testing::random_tensor;

namespace {

Eigen::VectorXd eigen_sigma(const Tensor<double>& m) {
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> map(m.data().data(), m.dim(0),
                                                                                               m.dim(1));
  return Eigen::JacobiSVD<Eigen::MatrixXd>(map).singularValues();
}

double squared_error(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

TEST_SUITE("svd") {
  TEST_CASE("singular values of identity and diagonal matrices") {
    const auto eye = singular_values(Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    CHECK(eye == std::vector<double>{1, 1, 1});
    const auto diag = singular_values(Tensor<double>::from({3, 3}, {1, 0, 0, 0, 3, 0, 0, 0, 2}));
    REQUIRE(diag.size() == 3);
    CHECK(diag[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(diag[1] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(diag[2] == doctest::Approx(1.0).epsilon(1e-14));
  }

  TEST_CASE("singular values agree with an independent SVD and the Frobenius norm") {
    for (Shape s : {Shape{8, 8}, Shape{16, 16}, Shape{5, 9}, Shape{12, 3}}) {
      const auto m = random_tensor<double>(s, s[0] * 31 + s[1]);
      const auto sigma = singular_values(m);
      const auto oracle = eigen_sigma(m);
      REQUIRE(sigma.size() == std::min(s[0], s[1]));
      double energy = 0.0, frob = 0.0;
      for (std::size_t i = 0; i < sigma.size(); ++i) {
        CHECK(std::abs(sigma[i] - oracle[static_cast<Eigen::Index>(i)]) < 1e-10);
        if (i) CHECK(sigma[i] <= sigma[i - 1]);
        CHECK(sigma[i] >= 0.0);
        energy += sigma[i] * sigma[i];
      }
      for (double v : m.data()) frob += v * v;
      CHECK(std::abs(energy - frob) < 1e-10);
    }
  }

  TEST_CASE("rank-deficient images with zero rows and columns converge") {
    Tensor<double> m({8, 8});
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const double d2 = (y - 3.2) * (y - 3.2) + (x - 4.7) * (x - 4.7);
        m[y * 8 + x] = std::round(200.0 * std::exp(-d2 / 6.0));
      }
    const auto sigma = singular_values(m);
    const auto oracle = eigen_sigma(m);
    for (std::size_t i = 0; i < sigma.size(); ++i)
      CHECK(std::abs(sigma[i] - oracle[static_cast<Eigen::Index>(i)]) < 1e-9 * oracle[0]);
    const auto img = m.reshaped({1, 8, 8});
    CHECK(max_diff(svd_truncate(img, SvdConfig::with_energy(1.0)), img) < 1e-9);
  }

  TEST_CASE("full energy reconstructs the input") {
    const auto img = random_tensor<double>({2, 8, 8}, 3, 0, 255);
    CHECK(max_diff(svd_truncate(img, SvdConfig::with_energy(1.0)), img) < 1e-8);
  }

  TEST_CASE("rank-1 input is reproduced by a rank-1 truncation") {
    const auto u = random_tensor<double>({6}, 4), v = random_tensor<double>({5}, 5);
    Tensor<double> m({1, 6, 5});
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 5; ++j) m[i * 5 + j] = u[i] * v[j];
    CHECK(max_diff(svd_truncate(m, SvdConfig::with_rank(1)), m) < 1e-8);
  }

  TEST_CASE("Eckart-Young: squared error equals the discarded energy") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto m = random_tensor<double>({8, 8}, 100 + seed);
      const auto oracle = eigen_sigma(m);
      const auto rec = svd_truncate(m.reshaped({1, 8, 8}), SvdConfig::with_rank(3)).reshaped({8, 8});
      double discarded = 0.0;
      for (Eigen::Index i = 3; i < oracle.size(); ++i) discarded += oracle[i] * oracle[i];
      CHECK(std::abs(squared_error(rec, m) - discarded) < 1e-8);
    }
  }

  TEST_CASE("truncation is idempotent and the error is monotone in k") {
    const auto m = random_tensor<double>({1, 10, 10}, 7);
    double previous = INFINITY;
    for (std::size_t k = 1; k <= 10; ++k) {
      const auto once = svd_truncate(m, SvdConfig::with_rank(k));
      CHECK(max_diff(svd_truncate(once, SvdConfig::with_rank(k)), once) < 1e-8);
      const double err = squared_error(once, m);
      CHECK(err <= previous + 1e-12);
      previous = err;
    }
  }

  TEST_CASE("rank_for_energy picks the smallest sufficient k") {
    const std::vector<double> sigma{3, 2, 1};  // energies 9, 4, 1 of 14
    CHECK(rank_for_energy(sigma, 0.5) == 1);
    CHECK(rank_for_energy(sigma, 9.0 / 14.0) == 1);
    CHECK(rank_for_energy(sigma, 0.7) == 2);
    CHECK(rank_for_energy(sigma, 0.95) == 3);
    CHECK(rank_for_energy(sigma, 1.0) == 3);
  }

  TEST_CASE("bounded sweeps raise kNotConverged") {
    const auto m = random_tensor<double>({16, 16}, 8);
    CHECK(error_kind_of([&] { jacobi_svd(m.vector(), 16, 16, 1); }) == ErrorKind::kNotConverged);
    CHECK(jacobi_svd(m.vector(), 16, 16).sweeps <= kMaxJacobiSweeps);
  }

  TEST_CASE("config parsing and validation") {
    CHECK(SvdConfig::parse("off") == SvdConfig::off());
    CHECK(SvdConfig::parse("0.9") == SvdConfig::with_energy(0.9));
    CHECK(SvdConfig::parse("energy:0.95") == SvdConfig::with_energy(0.95));
    CHECK(SvdConfig::parse("rank:3") == SvdConfig::with_rank(3));
    for (const auto& c : {SvdConfig::off(), SvdConfig::with_energy(0.8), SvdConfig::with_energy(0.1 + 0.2),
                          SvdConfig::with_rank(4)})
      CHECK(SvdConfig::parse(c.describe()) == c);
    CHECK(error_kind_of([] { SvdConfig::with_energy(0.0).validate(); }) == ErrorKind::kInvalidArgument);
    CHECK(error_kind_of([] { SvdConfig::with_energy(1.5).validate(); }) == ErrorKind::kInvalidArgument);
    CHECK(error_kind_of([] { SvdConfig::with_rank(0).validate(); }) == ErrorKind::kInvalidArgument);
    CHECK(error_kind_of([] { SvdConfig::parse("lots"); }) == ErrorKind::kInvalidArgument);
    // A rank above the image side keeps every component.
    const auto m = random_tensor<double>({1, 4, 4}, 9);
    CHECK(max_diff(svd_truncate(m, SvdConfig::with_rank(5)), m) < 1e-8);
  }
}
