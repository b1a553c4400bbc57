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
#include <string>
#include <vector>

#include "bplf/tensor.hpp"

namespace bplf {

/// Per-channel low-rank truncation applied to images before the model.
struct SvdConfig {
  enum class Mode { kOff, kEnergy, kRank };

  Mode mode = Mode::kOff;
  double energy = 0.95;  // fraction of squared singular-value mass kept
  std::size_t rank = 1;

  static SvdConfig off() { return {}; }
  static SvdConfig with_energy(double f) { return {Mode::kEnergy, f, 1}; }
  static SvdConfig with_rank(std::size_t k) { return {Mode::kRank, 0.95, k}; }

  bool enabled() const { return mode != Mode::kOff; }
  void validate() const;
  /// "off", "energy:0.95" or "rank:3".
  std::string describe() const;
  /// Inverse of `describe`; a bare number is read as an energy fraction.
  static SvdConfig parse(const std::string& text);
  /// Like `parse` but without `validate`, for reading back recorded settings.
  static SvdConfig parse_unchecked(const std::string& text);

  friend bool operator==(const SvdConfig&, const SvdConfig&) = default;
};

/// Thin decomposition A = U diag(sigma) V^T of a rows x cols matrix with
/// singular values sorted descending. U is rows x r, V is cols x r, r = min.
struct SvdResult {
  std::size_t rows = 0, cols = 0;
  std::vector<double> u;      // row-major rows x r
  std::vector<double> sigma;  // r
  std::vector<double> v;      // row-major cols x r
  std::size_t sweeps = 0;
};

inline constexpr std::size_t kMaxJacobiSweeps = 100;

/// One-sided Jacobi. Throws kNotConverged after `max_sweeps`.
SvdResult jacobi_svd(const std::vector<double>& matrix, std::size_t rows, std::size_t cols,
                     std::size_t max_sweeps = kMaxJacobiSweeps);

/// Descending singular values of an [H,W] tensor; count = min(H,W).
template <typename T>
std::vector<double> singular_values(const Tensor<T>& matrix);

/// Smallest k whose leading squared singular values reach `energy` of the total.
std::size_t rank_for_energy(const std::vector<double>& sigma, double energy);

/// Rank-k reconstruction of a matrix from its decomposition.
std::vector<double> reconstruct(const SvdResult& svd, std::size_t k);

/// Truncates every channel of a [C,H,W] image. Mode off returns the input.
template <typename T>
Tensor<T> svd_truncate(const Tensor<T>& image, const SvdConfig& cfg);

}  // namespace bplf
