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

#include <atomic>
#include <cstdlib>
#include <thread>

#include "bplf/error.hpp"

#ifdef BPLF_HAVE_OPENMP
#include <omp.h>
#endif

namespace bplf {
namespace {

std::atomic<bool> g_verification{false};
std::atomic<Fault> g_fault{Fault::kNone};

int initial_threads() {
  if (const char* env = std::getenv("FLOW_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

std::atomic<int>& threads_slot() {
  static std::atomic<int> slot{[] {
    int n = initial_threads();
#ifdef BPLF_HAVE_OPENMP
    omp_set_num_threads(n);
#endif
    return n;
  }()};
  return slot;
}

}  // namespace

bool verification_mode() { return g_verification.load(std::memory_order_relaxed); }
void set_verification_mode(bool on) { g_verification.store(on); }

VerificationScope::VerificationScope(bool on) : previous_(verification_mode()) {
  set_verification_mode(on);
}
VerificationScope::~VerificationScope() { set_verification_mode(previous_); }

Fault injected_fault() { return g_fault.load(std::memory_order_relaxed); }
void set_injected_fault(Fault fault) { g_fault.store(fault); }

Fault parse_fault(const std::string& name) {
  if (name.empty() || name == "none") return Fault::kNone;
  if (name == "affine-logdet-sign") return Fault::kAffineLogDetSign;
  fail(ErrorKind::kInvalidArgument, "unknown fault '" + name + "'");
}

int worker_threads() { return threads_slot().load(); }

void set_worker_threads(int n) {
  if (n < 1) fail(ErrorKind::kInvalidArgument, "thread count must be positive");
  threads_slot().store(n);
#ifdef BPLF_HAVE_OPENMP
  omp_set_num_threads(n);
#endif
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& key) {
  // FNV-1a over the key, folded into the base with a splitmix64 finalizer.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace bplf
