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

#include "bplf/runtime.hpp"
#include "bplf/verify.hpp"
#include "test_util.hpp"

using namespace bplf;

namespace {

struct FaultScope {
  explicit FaultScope(Fault f) { set_injected_fault(f); }
  ~FaultScope() { set_injected_fault(Fault::kNone); }
};

}  // namespace

TEST_SUITE("verify") {
  TEST_CASE("every check suite passes on a clean build") {
    const auto results = run_checks(0, false);
    CHECK(results.size() == 6);
    for (const auto& r : results) {
      CAPTURE(r.name);
      CAPTURE(r.detail);
      CHECK(r.passed);
    }
  }

  TEST_CASE("a flipped affine log-det sign is caught by the oracle suite") {
    FaultScope fault(Fault::kAffineLogDetSign);
    const auto r = logdet_oracle_suite(0);
    CHECK_FALSE(r.passed);
    CHECK(r.detail.find("affine") != std::string::npos);
  }

  TEST_CASE("the Jacobian suite catches the same fault") {
    FaultScope fault(Fault::kAffineLogDetSign);
    CHECK_FALSE(jacobian_suite(0, 2).passed);
  }

  TEST_CASE("quantization and metric suites") {
    CHECK(quantization_suite().passed);
    CHECK(metric_suite().passed);
  }
}
