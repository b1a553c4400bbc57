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

#include "bplf/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

#include "bplf/error.hpp"

namespace bplf::linalg {

LuFactors lu_factor(std::span<const double> matrix, std::size_t n) {
  if (matrix.size() != n * n) fail(ErrorKind::kShapeMismatch, "lu_factor expects a square matrix");
  LuFactors f;
  f.n = n;
  f.lu.assign(matrix.begin(), matrix.end());
  f.pivot.resize(n);
  auto& a = f.lu;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    double best = std::abs(a[k * n + k]);
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(a[i * n + k]) > best) {
        best = std::abs(a[i * n + k]);
        p = i;
      }
    }
    f.pivot[k] = p;
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[p * n + j]);
      f.sign = -f.sign;
    }
    const double d = a[k * n + k];
    if (d == 0.0) continue;  // singular; log_abs_det reports -inf
    for (std::size_t i = k + 1; i < n; ++i) {
      const double m = a[i * n + k] / d;
      a[i * n + k] = m;
      for (std::size_t j = k + 1; j < n; ++j) a[i * n + j] -= m * a[k * n + j];
    }
  }
  return f;
}

double LuFactors::log_abs_det() const {
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) acc += std::log(std::abs(lu[k * n + k]));
  return acc;
}

double LuFactors::abs_det() const { return std::exp(log_abs_det()); }

std::vector<double> LuFactors::solve(std::span<const double> rhs) const {
  std::vector<double> x(rhs.begin(), rhs.end());
  for (std::size_t k = 0; k < n; ++k)
    if (pivot[k] != k) std::swap(x[k], x[pivot[k]]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) x[i] -= lu[i * n + j] * x[j];
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = i + 1; j < n; ++j) x[i] -= lu[i * n + j] * x[j];
    x[i] /= lu[i * n + i];
  }
  return x;
}

std::vector<double> LuFactors::inverse() const {
  std::vector<double> inv(n * n);
  std::vector<double> e(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::fill(e.begin(), e.end(), 0.0);
    e[c] = 1.0;
    auto col = solve(e);
    for (std::size_t r = 0; r < n; ++r) inv[r * n + c] = col[r];
  }
  return inv;
}

std::vector<double> random_orthogonal(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> q(n * n);
  // Rows are orthonormalized in order (modified Gram-Schmidt, two passes).
  for (std::size_t i = 0; i < n; ++i) {
    for (;;) {
      for (std::size_t j = 0; j < n; ++j) q[i * n + j] = normal(rng);
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t r = 0; r < i; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += q[i * n + j] * q[r * n + j];
          for (std::size_t j = 0; j < n; ++j) q[i * n + j] -= dot * q[r * n + j];
        }
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < n; ++j) norm += q[i * n + j] * q[i * n + j];
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (std::size_t j = 0; j < n; ++j) q[i * n + j] /= norm;
      break;
    }
  }
  return q;
}

}  // namespace bplf::linalg
