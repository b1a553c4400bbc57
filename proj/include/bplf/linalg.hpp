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

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace bplf::linalg {

/// Row-major square matrix factorized as P*A = L*U by partial pivoting.
struct LuFactors {
  std::size_t n = 0;
  std::vector<double> lu;
  std::vector<std::size_t> pivot;
  int sign = 1;

  double log_abs_det() const;
  /// |det A|; underflows to zero rather than throwing.
  double abs_det() const;
  std::vector<double> solve(std::span<const double> rhs) const;
  /// A^{-1}, row-major.
  std::vector<double> inverse() const;
};

LuFactors lu_factor(std::span<const double> matrix, std::size_t n);

/// Random orthogonal n x n matrix (Gram-Schmidt on a Gaussian draw).
std::vector<double> random_orthogonal(std::size_t n, std::uint64_t seed);

}  // namespace bplf::linalg
