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

#include "bplf/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <set>
#include <sstream>
#include <unordered_set>

namespace bplf {
namespace fs = std::filesystem;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "short write to " + path.string());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t offset) {
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

std::uint8_t checked_pixel(float v, const std::string& where) {
  if (!(v >= 0.0f && v <= 255.0f)) fail(ErrorKind::kFormat, where + ": pixel value outside [0,255]");
  return static_cast<std::uint8_t>(std::lround(v));
}

}  // namespace

std::vector<std::string> emotion_class_names() {
  return std::vector<std::string>(kEmotionNames.begin(), kEmotionNames.end());
}

std::vector<std::string> digit_class_names() {
  std::vector<std::string> out;
  for (int d = 0; d < 10; ++d) out.push_back(std::to_string(d));
  return out;
}

std::optional<std::size_t> emotion_from_name(std::string_view name) {
  static const std::map<std::string, std::size_t> kAliases = {
      {"anger", 0},   {"angry", 0},      {"disgust", 1}, {"disgusted", 1}, {"fear", 2},
      {"fearful", 2}, {"afraid", 2},     {"happy", 3},   {"happiness", 3}, {"neutral", 4},
      {"neutrality", 4}, {"sad", 5},     {"sadness", 5}, {"surprise", 6},  {"surprised", 6},
  };
  auto it = kAliases.find(lower(name));
  if (it == kAliases.end()) return std::nullopt;
  return it->second;
}

std::size_t fer2013_to_canonical(std::size_t fer_label) {
  // FER: Angry, Disgust, Fear, Happy, Sad, Surprise, Neutral.
  static constexpr std::array<std::size_t, 7> kMap = {0, 1, 2, 3, 5, 6, 4};
  if (fer_label >= kMap.size()) fail(ErrorKind::kLabel, "FER label " + std::to_string(fer_label) + " out of range 0..6");
  return kMap[fer_label];
}

std::vector<float> one_hot(std::size_t label, std::size_t num_classes) {
  if (label >= num_classes)
    fail(ErrorKind::kLabel, "label " + std::to_string(label) + " out of range for " + std::to_string(num_classes) +
                                " classes");
  std::vector<float> v(num_classes, 0.0f);
  v[label] = 1.0f;
  return v;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  const std::string n = lower(name);
  if (n == "train" || n == "training") return Split::kTrain;
  if (n == "val" || n == "validation" || n == "publictest") return Split::kVal;
  if (n == "test" || n == "privatetest") return Split::kTest;
  fail(ErrorKind::kInvalidArgument, "unknown split '" + std::string(name) + "'");
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    fail(ErrorKind::kIo, "SHA-256 computation failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return out.str();
}

// ---------------------------------------------------------------------------
// IDX

IdxArray read_idx_file(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const std::string where = path.string();
  if (bytes.size() < 4) fail(ErrorKind::kFormat, where + ": truncated header at byte offset 0");
  if (bytes[0] != 0 || bytes[1] != 0)
    fail(ErrorKind::kFormat, where + ": bad magic at byte offset 0 (first two bytes must be zero)");
  if (bytes[2] != 0x08)
    fail(ErrorKind::kFormat, where + ": unsupported element type 0x" + std::to_string(bytes[2]) +
                                 " at byte offset 2 (only unsigned byte)");
  const std::size_t rank = bytes[3];
  if (rank == 0) fail(ErrorKind::kFormat, where + ": zero dimensions at byte offset 3");
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header)
    fail(ErrorKind::kFormat, where + ": truncated dimension list at byte offset " + std::to_string(bytes.size()));
  IdxArray out;
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    out.dims.push_back(read_be32(bytes, 4 + 4 * i));
    total *= out.dims.back();
  }
  if (bytes.size() - header < total)
    fail(ErrorKind::kFormat, where + ": truncated payload at byte offset " + std::to_string(bytes.size()) +
                                 " (expected " + std::to_string(total) + " bytes from offset " +
                                 std::to_string(header) + ")");
  if (bytes.size() - header > total)
    fail(ErrorKind::kFormat, where + ": trailing data at byte offset " + std::to_string(header + total));
  out.payload_offset = header;
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return out;
}

void write_idx_file(const fs::path& path, const std::vector<std::size_t>& dims, std::span<const std::uint8_t> data) {
  std::size_t total = 1;
  for (auto d : dims) total *= d;
  if (dims.empty() || dims.size() > 255 || total != data.size())
    fail(ErrorKind::kShapeMismatch, "write_idx_file: dims do not match payload size");
  std::vector<std::uint8_t> out = {0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
  for (auto d : dims) put_be32(out, static_cast<std::uint32_t>(d));
  out.insert(out.end(), data.begin(), data.end());
  write_bytes(path, out);
}

std::vector<Tensor<float>> read_idx(const fs::path& path) {
  const auto arr = read_idx_file(path);
  if (arr.dims.size() != 3)
    fail(ErrorKind::kFormat, path.string() + ": image file needs 3 dimensions, has " + std::to_string(arr.dims.size()));
  const std::size_t n = arr.dims[0], rows = arr.dims[1], cols = arr.dims[2], per = rows * cols;
  std::vector<Tensor<float>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> px(arr.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                          arr.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    out.emplace_back(Shape{1, rows, cols}, std::move(px));
  }
  return out;
}

std::vector<std::size_t> read_idx_labels(const fs::path& path) {
  const auto arr = read_idx_file(path);
  if (arr.dims.size() != 1)
    fail(ErrorKind::kFormat, path.string() + ": label file needs 1 dimension, has " + std::to_string(arr.dims.size()));
  return std::vector<std::size_t>(arr.data.begin(), arr.data.end());
}

void write_idx_images(const fs::path& path, const std::vector<Tensor<float>>& images) {
  if (images.empty()) fail(ErrorKind::kInvalidArgument, "write_idx_images: no images");
  const Shape shape = images[0].shape();
  if (shape.size() != 3 || shape[0] != 1)
    fail(ErrorKind::kShapeMismatch, "write_idx_images expects [1,H,W] images, got " + to_string(shape));
  std::vector<std::uint8_t> data;
  for (const auto& img : images) {
    if (img.shape() != shape) fail(ErrorKind::kShapeMismatch, "write_idx_images: mixed image shapes");
    for (float v : img.data()) data.push_back(checked_pixel(v, path.string()));
  }
  write_idx_file(path, {images.size(), shape[1], shape[2]}, data);
}

void write_idx_labels(const fs::path& path, const std::vector<std::size_t>& labels) {
  std::vector<std::uint8_t> data;
  for (auto l : labels) {
    if (l > 255) fail(ErrorKind::kLabel, "IDX labels must fit in one byte");
    data.push_back(static_cast<std::uint8_t>(l));
  }
  write_idx_file(path, {labels.size()}, data);
}

std::vector<LabeledImage> read_idx_dataset(const fs::path& images, const std::optional<fs::path>& labels,
                                           const std::string& source) {
  auto pixels = read_idx(images);
  std::vector<std::size_t> ys;
  if (labels) {
    ys = read_idx_labels(*labels);
    if (ys.size() != pixels.size())
      fail(ErrorKind::kFormat, labels->string() + ": " + std::to_string(ys.size()) + " labels for " +
                                   std::to_string(pixels.size()) + " images");
  }
  std::vector<LabeledImage> out;
  out.reserve(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    LabeledImage img{std::move(pixels[i]), std::nullopt, source, images.string() + "#" + std::to_string(i),
                     std::nullopt};
    if (labels) img.label = ys[i];
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pixel CSV

std::vector<LabeledImage> read_pixel_csv(const fs::path& path, const std::string& source) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<LabeledImage> out;
  std::string line;
  std::size_t row = 0;
  constexpr std::size_t kPixels = kPixelCsvSide * kPixelCsvSide;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
      field.erase(std::remove(field.begin(), field.end(), '"'), field.end());
      fields.push_back(field);
    }
    const std::string where = path.string() + " row " + std::to_string(row);
    auto is_integer = [](const std::string& s) {
      return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c) || std::isspace(c); });
    };
    if (row == 1 && (fields.empty() || !is_integer(fields[0]))) continue;  // header
    if (fields.size() < 2 || fields.size() > 3)
      fail(ErrorKind::kFormat, where + ": expected 'label,pixels[,usage]', got " + std::to_string(fields.size()) +
                                   " fields");
    if (!is_integer(fields[0])) fail(ErrorKind::kFormat, where + ": label '" + fields[0] + "' is not an integer");
    const std::size_t fer = std::stoul(fields[0]);
    std::vector<float> px;
    px.reserve(kPixels);
    std::stringstream ps(fields[1]);
    std::string tok;
    while (ps >> tok) {
      if (!is_integer(tok)) fail(ErrorKind::kFormat, where + ": pixel '" + tok + "' is not an integer");
      const unsigned long v = std::stoul(tok);
      if (v > 255) fail(ErrorKind::kFormat, where + ": pixel value " + tok + " exceeds 255");
      px.push_back(static_cast<float>(v));
    }
    if (px.size() != kPixels)
      fail(ErrorKind::kFormat, where + ": expected " + std::to_string(kPixels) + " pixels, got " +
                                   std::to_string(px.size()));
    LabeledImage img{Tensor<float>(Shape{1, kPixelCsvSide, kPixelCsvSide}, std::move(px)), fer2013_to_canonical(fer),
                     source, path.string() + ":" + std::to_string(row), std::nullopt};
    if (fields.size() == 3) {
      std::string usage = fields[2];
      usage.erase(std::remove_if(usage.begin(), usage.end(), [](unsigned char c) { return std::isspace(c); }),
                  usage.end());
      if (!usage.empty()) img.split = parse_split(usage);
    }
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM and folders

Tensor<float> read_pgm(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const std::string where = path.string();
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      ++digits;
    }
    if (!digits) fail(ErrorKind::kFormat, where + ": missing " + what + " at byte offset " + std::to_string(pos));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    fail(ErrorKind::kFormat, where + ": not a binary PGM (P5) file");
  pos = 2;
  const std::size_t w = read_number("width"), h = read_number("height"), maxval = read_number("maxval");
  if (w == 0 || h == 0) fail(ErrorKind::kFormat, where + ": zero image size");
  if (maxval == 0 || maxval > 255) fail(ErrorKind::kFormat, where + ": only 8-bit PGM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail(ErrorKind::kFormat, where + ": malformed header");
  ++pos;
  if (bytes.size() - pos < w * h)
    fail(ErrorKind::kFormat, where + ": truncated pixel data at byte offset " + std::to_string(bytes.size()));
  std::vector<float> px(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                        bytes.begin() + static_cast<std::ptrdiff_t>(pos + w * h));
  if (maxval != 255)
    for (auto& v : px) v = std::round(v * 255.0f / static_cast<float>(maxval));
  return Tensor<float>(Shape{1, h, w}, std::move(px));
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels) {
  if (pixels.size() != width * height) fail(ErrorKind::kShapeMismatch, "write_pgm: pixel count does not match size");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  write_bytes(path, out);
}

std::vector<LabeledImage> read_image_folder(const fs::path& root, const std::string& source) {
  if (!fs::is_directory(root)) fail(ErrorKind::kIo, root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<LabeledImage> out;
  for (const auto& dir : dirs) {
    const std::string name = dir.filename().string();
    if (!name.empty() && name[0] == '.') continue;
    const auto label = emotion_from_name(name);
    if (!label) fail(ErrorKind::kLabel, "unknown emotion directory '" + name + "' under " + root.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && lower(entry.path().extension().string()) == ".pgm") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back({read_pgm(f), *label, source, f.string(), std::nullopt});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

Tensor<float> to_grayscale(const Tensor<float>& image) {
  if (image.rank() != 3) fail(ErrorKind::kShapeMismatch, "expected [C,H,W], got " + to_string(image.shape()));
  const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  if (c == 1) return image;
  Tensor<float> out(Shape{1, image.dim(1), image.dim(2)});
  for (std::size_t i = 0; i < hw; ++i) {
    double acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) acc += image[ch * hw + i];
    out[i] = static_cast<float>(acc / static_cast<double>(c));
  }
  return out;
}

Tensor<float> center_crop_square(const Tensor<float>& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), s = std::min(h, w);
  if (h == w) return image;
  const std::size_t y0 = (h - s) / 2, x0 = (w - s) / 2;
  Tensor<float> out(Shape{c, s, s});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) out[(ch * s + y) * s + x] = image[(ch * h + y + y0) * w + x + x0];
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t side) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == side && w == side) return image;
  Tensor<float> out(Shape{c, side, side});
  auto source = [](std::size_t dst, std::size_t in, std::size_t outn) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < side; ++y) {
    const double sy = source(y, h, side);
    const std::size_t y0 = static_cast<std::size_t>(sy), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < side; ++x) {
      const double sx = source(x, w, side);
      const std::size_t x0 = static_cast<std::size_t>(sx), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = image.data().data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
        const double bottom = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
        out[(ch * side + y) * side + x] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> quantize_pixels(const Tensor<float>& image) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::clamp(std::round(static_cast<double>(image[i])), 0.0, 255.0));
  return out;
}

bool DatasetManifest::labeled() const {
  return !records.empty() &&
         std::all_of(records.begin(), records.end(), [](const ManifestRecord& r) { return r.label.has_value(); });
}

std::vector<std::size_t> DatasetManifest::label_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& r : records)
    if (r.label && *r.label < counts.size()) ++counts[*r.label];
  return counts;
}

std::map<Split, std::size_t> DatasetManifest::split_counts() const {
  std::map<Split, std::size_t> counts{{Split::kTrain, 0}, {Split::kVal, 0}, {Split::kTest, 0}};
  for (const auto& r : records) ++counts[r.split];
  return counts;
}

Tensor<float> Dataset::image(std::size_t i) const {
  const auto& r = manifest.records.at(i);
  const std::size_t n = manifest.image_bytes();
  if (r.offset + n > pixels.size()) fail(ErrorKind::kFormat, "record " + r.locator + " points outside the pixel store");
  std::vector<float> px(pixels.begin() + static_cast<std::ptrdiff_t>(r.offset),
                        pixels.begin() + static_cast<std::ptrdiff_t>(r.offset + n));
  return Tensor<float>(Shape{manifest.channels, manifest.side, manifest.side}, std::move(px));
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    if (manifest.records[i].split == split) out.push_back(i);
  return out;
}

Dataset preprocess(const std::vector<LabeledImage>& images, const PreprocessConfig& cfg) {
  if (cfg.side == 0) fail(ErrorKind::kInvalidArgument, "target side must be positive");
  if (cfg.val_fraction < 0 || cfg.test_fraction < 0 || cfg.val_fraction + cfg.test_fraction > 1)
    fail(ErrorKind::kInvalidArgument, "split fractions must be non-negative and sum to at most 1");
  cfg.svd.validate();

  Dataset out;
  out.manifest.side = cfg.side;
  out.manifest.channels = 1;
  out.manifest.class_names = cfg.class_names;
  std::unordered_set<std::string> seen;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  for (const auto& img : images) {
    if (img.pixels.rank() != 3)
      fail(ErrorKind::kShapeMismatch, img.locator + ": expected [C,H,W], got " + to_string(img.pixels.shape()));
    if (img.pixels.dim(1) < 8 || img.pixels.dim(2) < 8)
      fail(ErrorKind::kInvalidArgument, img.locator + ": image " + std::to_string(img.pixels.dim(1)) + "x" +
                                            std::to_string(img.pixels.dim(2)) + " is smaller than 8x8");
    if (img.label && *img.label >= cfg.class_names.size())
      fail(ErrorKind::kLabel, img.locator + ": label " + std::to_string(*img.label) + " outside the " +
                                  std::to_string(cfg.class_names.size()) + "-class taxonomy");

    auto bytes = quantize_pixels(resize_bilinear(center_crop_square(to_grayscale(img.pixels)), cfg.side));
    std::string checksum = sha256_hex(bytes);
    if (cfg.dedupe && !seen.insert(checksum).second) continue;
    if (cfg.svd.enabled()) {
      Tensor<float> plane(Shape{1, cfg.side, cfg.side}, std::vector<float>(bytes.begin(), bytes.end()));
      bytes = quantize_pixels(svd_truncate(plane, cfg.svd));
      checksum = sha256_hex(bytes);
    }

    ManifestRecord rec;
    rec.locator = img.locator;
    rec.label = img.label;
    rec.source = img.source;
    if (img.split) {
      rec.split = *img.split;
    } else if (cfg.val_fraction + cfg.test_fraction > 0) {
      const double u = uniform(rng);
      rec.split = u < cfg.test_fraction ? Split::kTest
                  : u < cfg.test_fraction + cfg.val_fraction ? Split::kVal
                                                             : Split::kTrain;
    }
    rec.offset = out.pixels.size();
    rec.checksum = std::move(checksum);
    out.pixels.insert(out.pixels.end(), bytes.begin(), bytes.end());
    out.manifest.records.push_back(std::move(rec));
  }
  out.manifest.checksum = sha256_hex(out.pixels);
  return out;
}

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json manifest_to_json(const DatasetManifest& m) {
  ordered_json j;
  j["format_version"] = m.format_version;
  j["side"] = m.side;
  j["channels"] = m.channels;
  j["class_names"] = m.class_names;
  j["pixel_store"] = m.pixel_store;
  j["checksum"] = m.checksum;
  ordered_json counts = ordered_json::object();
  const auto lc = m.label_counts();
  for (std::size_t i = 0; i < m.class_names.size(); ++i) counts[m.class_names[i]] = lc[i];
  j["counts"] = counts;
  ordered_json splits = ordered_json::object();
  for (const auto& [split, n] : m.split_counts()) splits[to_string(split)] = n;
  j["split_counts"] = splits;
  ordered_json records = ordered_json::array();
  for (const auto& r : m.records) {
    ordered_json jr;
    jr["locator"] = r.locator;
    jr["label"] = r.label ? ordered_json(*r.label) : ordered_json(nullptr);
    jr["source"] = r.source;
    jr["split"] = to_string(r.split);
    jr["offset"] = r.offset;
    jr["checksum"] = r.checksum;
    records.push_back(std::move(jr));
  }
  j["records"] = std::move(records);
  return j;
}

}  // namespace

void save_dataset(const Dataset& data, const fs::path& manifest_path) {
  const fs::path dir = manifest_path.has_parent_path() ? manifest_path.parent_path() : fs::path(".");
  fs::create_directories(dir);
  write_bytes(dir / data.manifest.pixel_store, data.pixels);
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + manifest_path.string());
  out << manifest_to_json(data.manifest).dump(2) << "\n";
}

Dataset load_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + manifest_path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, manifest_path.string() + ": " + e.what());
  }
  Dataset d;
  auto& m = d.manifest;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1)
      fail(ErrorKind::kFormat, manifest_path.string() + ": unsupported format_version " +
                                   std::to_string(m.format_version));
    m.side = j.at("side").get<std::size_t>();
    m.channels = j.at("channels").get<std::size_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.pixel_store = j.at("pixel_store").get<std::string>();
    m.checksum = j.at("checksum").get<std::string>();
    for (const auto& jr : j.at("records")) {
      ManifestRecord r;
      r.locator = jr.at("locator").get<std::string>();
      if (!jr.at("label").is_null()) r.label = jr.at("label").get<std::size_t>();
      r.source = jr.at("source").get<std::string>();
      r.split = parse_split(jr.at("split").get<std::string>());
      r.offset = jr.at("offset").get<std::uint64_t>();
      r.checksum = jr.at("checksum").get<std::string>();
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, manifest_path.string() + ": " + e.what());
  }
  const fs::path dir = manifest_path.has_parent_path() ? manifest_path.parent_path() : fs::path(".");
  d.pixels = read_bytes(dir / m.pixel_store);
  if (sha256_hex(d.pixels) != m.checksum)
    fail(ErrorKind::kFormat, manifest_path.string() + ": pixel store checksum mismatch");
  if (d.pixels.size() != m.records.size() * m.image_bytes())
    fail(ErrorKind::kFormat, manifest_path.string() + ": pixel store size does not match the record count");
  // Stored counts must agree with the records.
  if (manifest_to_json(m).at("counts") != j.at("counts"))
    fail(ErrorKind::kFormat, manifest_path.string() + ": counts do not match the records");
  std::set<std::string> train, other;
  for (const auto& r : m.records) (r.split == Split::kTrain ? train : other).insert(r.locator);
  for (const auto& loc : train)
    if (other.count(loc)) fail(ErrorKind::kFormat, manifest_path.string() + ": locator " + loc + " in several splits");
  return d;
}

std::string format_count_table(const DatasetManifest& manifest) {
  std::ostringstream out;
  const auto counts = manifest.label_counts();
  std::size_t width = 5;
  for (const auto& name : manifest.class_names) width = std::max(width, name.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out << std::left << std::setw(static_cast<int>(width) + 2) << manifest.class_names[i] << counts[i] << "\n";
    total += counts[i];
  }
  out << std::left << std::setw(static_cast<int>(width) + 2) << "Total" << total << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Model-space conversion

template <typename T>
Tensor<T> to_model_input(const Tensor<float>& pixels, bool train, std::mt19937_64* rng) {
  if (train && rng == nullptr) fail(ErrorKind::kInvalidArgument, "training-mode dequantization needs a generator");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Tensor<T> out(pixels.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double p = pixels[i];
    const double u = train ? uniform(*rng) : 0.5;
    T v = static_cast<T>((p + u - 128.0) / 128.0);
    // Rounding to T must not reach the upper edge of the pixel's bin.
    const T upper = static_cast<T>((p - 127.0) / 128.0);
    if (v >= upper) v = std::nextafter(upper, T(-2));
    out[i] = v;
  }
  return out;
}

std::uint8_t to_pixel(double x) {
  if (std::isnan(x)) return 0;
  return static_cast<std::uint8_t>(std::clamp(std::round(x * 128.0 + 128.0 - 0.5), 0.0, 255.0));
}

template <typename T>
std::vector<std::uint8_t> to_image(const Tensor<T>& x) {
  std::vector<std::uint8_t> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = to_pixel(static_cast<double>(x[i]));
  return out;
}

template Tensor<float> to_model_input<float>(const Tensor<float>&, bool, std::mt19937_64*);
template Tensor<double> to_model_input<double>(const Tensor<float>&, bool, std::mt19937_64*);
template std::vector<std::uint8_t> to_image(const Tensor<float>&);
template std::vector<std::uint8_t> to_image(const Tensor<double>&);

}  // namespace bplf
