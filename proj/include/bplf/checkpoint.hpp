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

// Checkpoint directory layout:
//
//   manifest.json  format version, architecture, SVD setting, class names,
//                  tensor index, seed and epoch
//   weights.bin    every parameter tensor, little-endian f32, row-major,
//                  concatenated in index order

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "bplf/flow_model.hpp"

namespace bplf {

inline constexpr int kCheckpointFormatVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
  std::string dtype = "f32";
  std::uint64_t offset = 0;  // bytes into weights.bin

  friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  ArchitectureConfig arch;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::vector<TensorEntry> tensors;
  std::vector<std::uint8_t> weights;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

template <typename T>
Checkpoint make_checkpoint(FlowModel<T>& model, const std::vector<std::string>& class_names, std::size_t epoch);

/// Creates the directory if needed and writes both files.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Validates the manifest and that every tensor lies inside the blob.
Checkpoint read_checkpoint(const std::filesystem::path& dir);

/// Rebuilds the model and copies the stored weights in.
template <typename T>
std::unique_ptr<FlowModel<T>> model_from_checkpoint(const Checkpoint& ckpt);

template <typename T>
void save_checkpoint(FlowModel<T>& model, const std::filesystem::path& dir,
                     const std::vector<std::string>& class_names, std::size_t epoch) {
  write_checkpoint(make_checkpoint(model, class_names, epoch), dir);
}

}  // namespace bplf
