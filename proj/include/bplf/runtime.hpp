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

#include <cstdint>
#include <string>

namespace bplf {

// Process-wide switches. These are read on hot paths, so they are plain
// atomics behind accessor functions.

/// In verification mode the division/log guards raise instead of clamping.
bool verification_mode();
void set_verification_mode(bool on);

/// RAII toggle used by the check suites and tests.
class VerificationScope {
 public:
  explicit VerificationScope(bool on = true);
  ~VerificationScope();
  VerificationScope(const VerificationScope&) = delete;
  VerificationScope& operator=(const VerificationScope&) = delete;

 private:
  bool previous_;
};

/// Deliberate faults for mutation-testing the verification suites.
enum class Fault : std::uint8_t {
  kNone,
  kAffineLogDetSign,
};

Fault injected_fault();
void set_injected_fault(Fault fault);
Fault parse_fault(const std::string& name);

/// Worker cap. Defaults to FLOW_THREADS when set, otherwise the core count.
int worker_threads();
void set_worker_threads(int n);

/// Deterministic 64-bit seed derived from a base seed and a string key, so
/// that each parameter draws from its own stream independent of build order.
std::uint64_t derive_seed(std::uint64_t base, const std::string& key);

}  // namespace bplf
