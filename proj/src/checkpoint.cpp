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

#include "bplf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>

namespace bplf {
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t{p[i]} << (8 * i);
  return std::bit_cast<float>(bits);
}

ordered_json arch_to_json(const ArchitectureConfig& a) {
  ordered_json j;
  j["levels"] = a.levels;
  j["depth"] = a.depth;
  j["coupling"] = to_string(a.coupling);
  j["conv"] = to_string(a.conv);
  j["hidden"] = a.hidden;
  j["conditional"] = a.conditional;
  j["num_classes"] = a.num_classes;
  j["channels"] = a.channels;
  j["height"] = a.height;
  j["width"] = a.width;
  return j;
}

ArchitectureConfig arch_from_json(const ordered_json& j) {
  ArchitectureConfig a;
  a.levels = j.at("levels").get<std::size_t>();
  a.depth = j.at("depth").get<std::size_t>();
  a.coupling = parse_coupling_kind(j.at("coupling").get<std::string>());
  a.conv = parse_conv_kind(j.at("conv").get<std::string>());
  a.hidden = j.at("hidden").get<std::size_t>();
  a.conditional = j.at("conditional").get<bool>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.channels = j.at("channels").get<std::size_t>();
  a.height = j.at("height").get<std::size_t>();
  a.width = j.at("width").get<std::size_t>();
  return a;
}

}  // namespace

template <typename T>
Checkpoint make_checkpoint(FlowModel<T>& model, const std::vector<std::string>& class_names, std::size_t epoch) {
  Checkpoint ckpt;
  ckpt.arch = model.config();
  ckpt.class_names = class_names;
  ckpt.seed = model.seed();
  ckpt.epoch = epoch;
  for (auto* p : model.parameters()) {
    ckpt.tensors.push_back({p->name, p->value.shape(), "f32", ckpt.weights.size()});
    for (T v : p->value.data()) put_f32(ckpt.weights, static_cast<float>(v));
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  fs::create_directories(dir);
  ordered_json j;
  j["format_version"] = ckpt.format_version;
  j["architecture"] = arch_to_json(ckpt.arch);
  j["svd"] = ckpt.arch.svd.describe();
  j["class_names"] = ckpt.class_names;
  j["seed"] = ckpt.seed;
  j["epoch"] = ckpt.epoch;
  ordered_json tensors = ordered_json::array();
  for (const auto& t : ckpt.tensors) {
    ordered_json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["dtype"] = t.dtype;
    e["offset"] = t.offset;
    tensors.push_back(std::move(e));
  }
  j["tensors"] = std::move(tensors);

  std::ofstream m(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!m) fail(ErrorKind::kIo, "cannot write " + (dir / "manifest.json").string());
  m << j.dump(2) << "\n";
  std::ofstream w(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!w) fail(ErrorKind::kIo, "cannot write " + (dir / "weights.bin").string());
  w.write(reinterpret_cast<const char*>(ckpt.weights.data()), static_cast<std::streamsize>(ckpt.weights.size()));
  if (!m || !w) fail(ErrorKind::kIo, "short write to checkpoint " + dir.string());
}

Checkpoint read_checkpoint(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  std::ifstream in(manifest);
  if (!in) fail(ErrorKind::kIo, "cannot open " + manifest.string());
  Checkpoint ckpt;
  try {
    ordered_json j;
    in >> j;
    ckpt.format_version = j.at("format_version").get<int>();
    if (ckpt.format_version != kCheckpointFormatVersion)
      fail(ErrorKind::kFormat, manifest.string() + ": unsupported format_version " +
                                   std::to_string(ckpt.format_version));
    ckpt.arch = arch_from_json(j.at("architecture"));
    ckpt.arch.svd = SvdConfig::parse(j.at("svd").get<std::string>());
    ckpt.class_names = j.at("class_names").get<std::vector<std::string>>();
    ckpt.seed = j.at("seed").get<std::uint64_t>();
    ckpt.epoch = j.at("epoch").get<std::size_t>();
    for (const auto& e : j.at("tensors"))
      ckpt.tensors.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(),
                              e.at("dtype").get<std::string>(), e.at("offset").get<std::uint64_t>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, manifest.string() + ": " + e.what());
  }
  ckpt.arch.validate();

  const fs::path blob = dir / "weights.bin";
  std::ifstream w(blob, std::ios::binary);
  if (!w) fail(ErrorKind::kIo, "cannot open " + blob.string());
  ckpt.weights.assign(std::istreambuf_iterator<char>(w), {});
  for (const auto& t : ckpt.tensors) {
    if (t.dtype != "f32") fail(ErrorKind::kFormat, t.name + ": unsupported dtype " + t.dtype);
    const std::uint64_t bytes = 4 * numel(t.shape);
    if (t.offset + bytes > ckpt.weights.size())
      fail(ErrorKind::kFormat, t.name + ": tensor at offset " + std::to_string(t.offset) + " (" +
                                   std::to_string(bytes) + " bytes) runs past the end of weights.bin (" +
                                   std::to_string(ckpt.weights.size()) + " bytes)");
  }
  return ckpt;
}

template <typename T>
std::unique_ptr<FlowModel<T>> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = std::make_unique<FlowModel<T>>(ckpt.arch, ckpt.seed);
  std::map<std::string, const TensorEntry*> index;
  for (const auto& t : ckpt.tensors) index[t.name] = &t;
  const auto params = model->parameters();
  if (params.size() != ckpt.tensors.size())
    fail(ErrorKind::kFormat, "checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                                 std::to_string(params.size()));
  for (auto* p : params) {
    auto it = index.find(p->name);
    if (it == index.end()) fail(ErrorKind::kFormat, "checkpoint is missing tensor " + p->name);
    const TensorEntry& t = *it->second;
    if (t.shape != p->value.shape())
      fail(ErrorKind::kShapeMismatch, p->name + ": checkpoint shape " + to_string(t.shape) + ", model shape " +
                                          to_string(p->value.shape()));
    const std::uint8_t* src = ckpt.weights.data() + t.offset;
    auto dst = p->value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(get_f32(src + 4 * i));
  }
  return model;
}

template Checkpoint make_checkpoint(FlowModel<float>&, const std::vector<std::string>&, std::size_t);
template Checkpoint make_checkpoint(FlowModel<double>&, const std::vector<std::string>&, std::size_t);
template std::unique_ptr<FlowModel<float>> model_from_checkpoint<float>(const Checkpoint&);
template std::unique_ptr<FlowModel<double>> model_from_checkpoint<double>(const Checkpoint&);

}  // namespace bplf
