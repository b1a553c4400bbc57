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

// Dataset ingestion and preprocessing.
//
// Readers produce LabeledImage records with raw 8-bit pixel values stored as
// floats. `preprocess` turns them into a DatasetManifest plus a flat byte
// store of S x S grayscale images. Emotion labels always use the canonical
// order Anger, Disgust, Fear, Happy, Neutral, Sad, Surprise.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bplf/svd.hpp"
#include "bplf/tensor.hpp"

namespace bplf {

inline constexpr std::array<std::string_view, 7> kEmotionNames = {"Anger", "Disgust", "Fear",    "Happy",
                                                                   "Neutral", "Sad",   "Surprise"};

std::vector<std::string> emotion_class_names();
std::vector<std::string> digit_class_names();

/// Canonical emotion index for a directory or label name ("anger", "Happy",
/// "happiness", ...). Empty when the name is not an emotion.
std::optional<std::size_t> emotion_from_name(std::string_view name);

/// FER2013 publishes labels as 0 Angry, 1 Disgust, 2 Fear, 3 Happy, 4 Sad,
/// 5 Surprise, 6 Neutral. Maps that index onto the canonical order.
std::size_t fer2013_to_canonical(std::size_t fer_label);

std::vector<float> one_hot(std::size_t label, std::size_t num_classes);

enum class Split { kTrain, kVal, kTest };
std::string to_string(Split split);
Split parse_split(std::string_view name);

struct LabeledImage {
  Tensor<float> pixels;  // [C,H,W], values in [0,255]
  std::optional<std::size_t> label;
  std::string source;
  std::string locator;
  std::optional<Split> split;
};

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// IDX (big-endian, unsigned-byte payload)

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
  std::size_t payload_offset = 0;
};

IdxArray read_idx_file(const std::filesystem::path& path);
void write_idx_file(const std::filesystem::path& path, const std::vector<std::size_t>& dims,
                    std::span<const std::uint8_t> data);

/// Images of a rank-3 IDX file as [1,rows,cols] tensors.
std::vector<Tensor<float>> read_idx(const std::filesystem::path& path);
std::vector<std::size_t> read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const std::vector<Tensor<float>>& images);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::size_t>& labels);

/// Images plus labels from an optional companion label file.
std::vector<LabeledImage> read_idx_dataset(const std::filesystem::path& images,
                                           const std::optional<std::filesystem::path>& labels,
                                           const std::string& source = "idx");

// ---------------------------------------------------------------------------
// FER-style pixel CSV: "label,pixels[,usage]" with 48*48 space-separated
// pixels. The header row is optional.

inline constexpr std::size_t kPixelCsvSide = 48;

std::vector<LabeledImage> read_pixel_csv(const std::filesystem::path& path, const std::string& source = "csv");

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit) and emotion-named image folders

Tensor<float> read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels);

/// root/<emotion>/*.pgm. Unknown directory names are an error.
std::vector<LabeledImage> read_image_folder(const std::filesystem::path& root, const std::string& source = "folder");

// ---------------------------------------------------------------------------
// Preprocessing and manifest

struct PreprocessConfig {
  std::size_t side = 48;
  SvdConfig svd;
  bool dedupe = false;
  /// Fractions used for records whose source did not assign a split.
  double val_fraction = 0.0;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names = emotion_class_names();
};

struct ManifestRecord {
  std::string locator;
  std::optional<std::size_t> label;
  std::string source;
  Split split = Split::kTrain;
  std::uint64_t offset = 0;
  std::string checksum;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  int format_version = 1;
  std::size_t side = 0;
  std::size_t channels = 1;
  std::vector<std::string> class_names;
  std::vector<ManifestRecord> records;
  std::string pixel_store = "pixels.bin";
  std::string checksum;  // SHA-256 of the pixel store

  std::size_t image_bytes() const { return channels * side * side; }
  bool labeled() const;
  /// Per-class counts in class-name order; unlabeled records are not counted.
  std::vector<std::size_t> label_counts() const;
  std::map<Split, std::size_t> split_counts() const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<std::uint8_t> pixels;

  std::size_t size() const { return manifest.records.size(); }
  /// Pixels of record i as a [C,S,S] float tensor in [0,255].
  Tensor<float> image(std::size_t i) const;
  std::vector<std::size_t> indices(Split split) const;
};

/// Grayscale, center crop, bilinear resize, optional dedupe, optional SVD.
Dataset preprocess(const std::vector<LabeledImage>& images, const PreprocessConfig& cfg);

/// Individual stages, exposed for tests and custom pipelines.
Tensor<float> to_grayscale(const Tensor<float>& image);
Tensor<float> center_crop_square(const Tensor<float>& image);
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t side);
std::vector<std::uint8_t> quantize_pixels(const Tensor<float>& image);

/// Writes manifest.json (or the given .json path) and the pixel store beside it.
void save_dataset(const Dataset& data, const std::filesystem::path& manifest_path);
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Per-label count table in class order, one "Name count" row per class.
std::string format_count_table(const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Pixel <-> model-space conversion

/// Train: (p + u - 128) / 128 with u ~ U[0,1). Eval: (p + 0.5 - 128) / 128.
/// Output lies in [-1, 1).
template <typename T>
Tensor<T> to_model_input(const Tensor<float>& pixels, bool train, std::mt19937_64* rng);

/// clamp(round(x * 128 + 128 - 0.5), 0, 255), rounding half away from zero.
std::uint8_t to_pixel(double x);
template <typename T>
std::vector<std::uint8_t> to_image(const Tensor<T>& x);

}  // namespace bplf
