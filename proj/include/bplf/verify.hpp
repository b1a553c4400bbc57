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

// Self-check suites behind `bplf check`. Each suite compares the library
// against an oracle computed a different way and reports the worst case.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bplf {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  std::uint64_t seed = 0;
  double seconds = 0.0;
};

/// decode(encode(x)) == x for every coupling, conv kind and conditioning
/// mode, in 32-bit (tol 1e-4) and 64-bit (tol 1e-10).
SuiteResult roundtrip_suite(std::uint64_t seed, std::size_t inputs = 100);

/// Closed-form log-det checks: zero-initialized couplings, the 1x1
/// convolution against a direct determinant and perturbed couplings against
/// scales recomputed from their nets.
SuiteResult logdet_oracle_suite(std::uint64_t seed);

/// Analytic log-det against numerical_logdet at D = 16 for every layer kind
/// and a three-layer composition (64-bit, tol 1e-6).
SuiteResult jacobian_suite(std::uint64_t seed, std::size_t instances = 20);

/// Tape gradients of the mean NLL against central differences for tiny
/// models of every coupling kind (64-bit, relative tol 1e-4).
SuiteResult gradient_suite(std::uint64_t seed);

/// Pixel -> model space -> pixel is the identity on all 256 values.
SuiteResult quantization_suite();

/// bits/dim algebra.
SuiteResult metric_suite();

/// Eckart-Young equality and full-energy reconstruction on random matrices.
SuiteResult svd_suite(std::uint64_t seed, std::size_t matrices = 50);

/// The `bplf check` set; `deep` adds the Jacobian suite.
std::vector<SuiteResult> run_checks(std::uint64_t seed, bool deep);

}  // namespace bplf
