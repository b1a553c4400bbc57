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

#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "bplf/data.hpp"
#include "test_util.hpp"

using namespace bplf;
using bplf::testing::error_kind_of;
using bplf::testing::random_tensor;
using bplf::testing::slurp;
using bplf::testing::TempDir;
using bplf::testing::write_text;
namespace fs = std::filesystem;
using namespace std::string_literals;

namespace {

Tensor<float> pixel_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  auto t = random_tensor<float>({c, h, w}, seed, 0.0, 255.0);
  for (auto& v : t.data()) v = std::round(v);
  return t;
}

std::string csv_row(int label, int fill, std::size_t count, const std::string& usage = "") {
  std::ostringstream row;
  row << label << ",";
  for (std::size_t i = 0; i < count; ++i) row << (i ? " " : "") << (fill + i) % 256;
  if (!usage.empty()) row << "," << usage;
  return row.str() + "\n";
}

void write_pgm_image(const fs::path& path, const Tensor<float>& img) {
  std::vector<std::uint8_t> px(img.data().begin(), img.data().end());
  write_pgm(path, img.dim(2), img.dim(1), px);
}

// sha256sum from coreutils, run as a separate process.
std::string external_sha256(const fs::path& path) {
  std::string cmd = "sha256sum '" + path.string() + "'";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[65] = {};
  const std::size_t n = std::fread(buf, 1, 64, pipe);
  pclose(pipe);
  return std::string(buf, n);
}

LabeledImage labeled(Tensor<float> px, std::size_t label, const std::string& loc) {
  return {std::move(px), label, "test", loc, std::nullopt};
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("canonical emotion order and FER translation") {
    CHECK(emotion_class_names() ==
          std::vector<std::string>{"Anger", "Disgust", "Fear", "Happy", "Neutral", "Sad", "Surprise"});
    // FER: 0 Angry 1 Disgust 2 Fear 3 Happy 4 Sad 5 Surprise 6 Neutral
    const std::vector<std::string> fer_names{"Anger", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral"};
    for (std::size_t i = 0; i < 7; ++i) CHECK(emotion_class_names()[fer2013_to_canonical(i)] == fer_names[i]);
    CHECK(error_kind_of([] { fer2013_to_canonical(7); }) == ErrorKind::kLabel);
    CHECK(emotion_from_name("happy") == 3u);
    CHECK(emotion_from_name("Anger") == 0u);
    CHECK(emotion_from_name("angry") == 0u);
    CHECK(emotion_from_name("surprised") == 6u);
    CHECK(!emotion_from_name("boredom"));
  }

  TEST_CASE("one-hot vectors sum to one") {
    const auto v = one_hot(4, 7);
    CHECK(v.size() == 7);
    CHECK(v[4] == 1.0f);
    CHECK(std::accumulate(v.begin(), v.end(), 0.0f) == 1.0f);
    CHECK(error_kind_of([] { one_hot(7, 7); }) == ErrorKind::kLabel);
  }

  TEST_CASE("sha256 of a published test vector") {
    const std::string abc = "abc";
    CHECK(sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }

  TEST_CASE("IDX fixture round-trips and its payload checksum matches an external tool") {
    TempDir dir("idx");
    const std::vector<Tensor<float>> images{pixel_image(1, 28, 28, 1), pixel_image(1, 28, 28, 2)};
    write_idx_images(dir / "img", images);
    write_idx_labels(dir / "lab", {3, 9});
    const auto back = read_idx(dir / "img");
    REQUIRE(back.size() == 2);
    CHECK(back[0] == images[0]);
    CHECK(back[1] == images[1]);
    CHECK(read_idx_labels(dir / "lab") == std::vector<std::size_t>{3, 9});

    const auto arr = read_idx_file(dir / "img");
    CHECK(arr.dims == std::vector<std::size_t>{2, 28, 28});
    CHECK(arr.payload_offset == 16);
    const std::string body = slurp(dir / "img").substr(16);
    write_text(dir / "body", body);
    CHECK(sha256_hex(arr.data) == external_sha256(dir / "body"));

    const auto ds = read_idx_dataset(dir / "img", fs::path(dir / "lab"));
    CHECK(ds[1].label == 9u);
    CHECK(ds[1].pixels.shape() == Shape{1, 28, 28});
  }

  TEST_CASE("IDX header arithmetic for a large count") {
    TempDir dir("idxbig");
    const std::size_t n = 10000;
    std::vector<std::uint8_t> payload(n * 28 * 28, 7);
    write_idx_file(dir / "big", {n, 28, 28}, payload);
    const auto imgs = read_idx(dir / "big");
    CHECK(imgs.size() == n);
    CHECK(imgs.back().shape() == Shape{1, 28, 28});
  }

  TEST_CASE("IDX errors carry byte offsets") {
    TempDir dir("idxbad");
    std::string msg;
    write_text(dir / "magic", "\x01\x00\x08\x01\x00\x00\x00\x01\x05"s);
    CHECK(error_kind_of([&] { read_idx_file(dir / "magic"); }, &msg) == ErrorKind::kFormat);
    CHECK(msg.find("byte offset 0") != std::string::npos);

    write_text(dir / "short", "\x00\x00\x08\x03\x00\x00\x00\x02\x00\x00\x00\x02\x00\x00\x00\x02\x01\x02"s);
    CHECK(error_kind_of([&] { read_idx_file(dir / "short"); }, &msg) == ErrorKind::kFormat);
    CHECK(msg.find("truncated payload at byte offset 18") != std::string::npos);

    write_text(dir / "dims", "\x00\x00\x08\x03\x00\x00"s);
    CHECK(error_kind_of([&] { read_idx_file(dir / "dims"); }, &msg) == ErrorKind::kFormat);
    CHECK(msg.find("byte offset") != std::string::npos);
    CHECK(error_kind_of([&] { read_idx_file(dir / "missing"); }) == ErrorKind::kIo);
  }

  TEST_CASE("pixel CSV parsing") {
    TempDir dir("csv");
    write_text(dir / "fer.csv", "emotion,pixels,Usage\n" + csv_row(3, 0, 2304, "Training") +
                                    csv_row(4, 10, 2304, "PublicTest") + csv_row(6, 20, 2304, "PrivateTest") +
                                    csv_row(0, 30, 2304));
    const auto rows = read_pixel_csv(dir / "fer.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].pixels.shape() == Shape{1, 48, 48});
    CHECK(rows[0].label == 3u);  // Happy
    CHECK(rows[1].label == 5u);  // Sad
    CHECK(rows[2].label == 4u);  // Neutral
    CHECK(rows[0].split == Split::kTrain);
    CHECK(rows[1].split == Split::kVal);
    CHECK(rows[2].split == Split::kTest);
    CHECK(!rows[3].split);
    CHECK(rows[1].pixels[0] == 10.0f);
    CHECK(rows[1].pixels[47] == 57.0f);

    write_text(dir / "empty.csv", "");
    CHECK(read_pixel_csv(dir / "empty.csv").empty());

    write_text(dir / "bad.csv", csv_row(1, 0, 2304) + csv_row(2, 0, 2303));
    std::string msg;
    CHECK(error_kind_of([&] { read_pixel_csv(dir / "bad.csv"); }, &msg) == ErrorKind::kFormat);
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("2303") != std::string::npos);
  }

  TEST_CASE("PGM round trip and header comments") {
    TempDir dir("pgm");
    const auto img = pixel_image(1, 5, 7, 3);
    write_pgm_image(dir / "a.pgm", img);
    CHECK(read_pgm(dir / "a.pgm") == img);
    write_text(dir / "c.pgm", "P5\n# made by hand\n2 1\n# max\n255\n\x05\xff"s);
    const auto c = read_pgm(dir / "c.pgm");
    CHECK(c.shape() == Shape{1, 1, 2});
    CHECK(c[0] == 5.0f);
    CHECK(c[1] == 255.0f);
    write_text(dir / "p2.pgm", "P2\n1 1\n255\n0\n");
    CHECK(error_kind_of([&] { read_pgm(dir / "p2.pgm"); }) == ErrorKind::kFormat);
  }

  TEST_CASE("image folder reader") {
    TempDir dir("folder");
    fs::create_directories(dir / "anger");
    fs::create_directories(dir / "happy");
    for (int i = 0; i < 3; ++i) write_pgm_image(dir / "anger" / ("a" + std::to_string(i) + ".pgm"), pixel_image(1, 8, 8, i));
    write_pgm_image(dir / "happy" / "h0.pgm", pixel_image(1, 8, 8, 10));
    write_pgm_image(dir / "happy" / "h1.pgm", pixel_image(1, 8, 8, 10));
    const auto recs = read_image_folder(dir.path());
    REQUIRE(recs.size() == 5);
    std::vector<std::size_t> labels;
    for (const auto& r : recs) labels.push_back(*r.label);
    CHECK(labels == std::vector<std::size_t>{0, 0, 0, 3, 3});

    // Duplicates are kept by the reader; their checksums agree.
    const auto ds = preprocess(recs, PreprocessConfig{.side = 8});
    CHECK(ds.size() == 5);
    CHECK(ds.manifest.records[3].checksum == ds.manifest.records[4].checksum);

    fs::create_directories(dir / "boredom");
    std::string msg;
    CHECK(error_kind_of([&] { read_image_folder(dir.path()); }, &msg) == ErrorKind::kLabel);
    CHECK(msg.find("boredom") != std::string::npos);
  }

  TEST_CASE("grayscale, crop and bilinear resize stages") {
    Tensor<float> rgb({3, 1, 1});
    rgb[0] = 30;
    rgb[1] = 60;
    rgb[2] = 120;
    CHECK(to_grayscale(rgb)[0] == 70.0f);

    Tensor<float> wide({1, 48, 64});
    for (std::size_t r = 0; r < 48; ++r)
      for (std::size_t c = 0; c < 64; ++c) wide[r * 64 + c] = static_cast<float>(c);
    const auto crop = center_crop_square(wide);
    CHECK(crop.shape() == Shape{1, 48, 48});
    CHECK(crop[0] == 8.0f);
    CHECK(crop[47] == 55.0f);

    // Half-pixel mapping: output column j samples source column 2j + 0.5.
    Tensor<float> ramp({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<float>(i % 4);
    const auto half = resize_bilinear(ramp, 2);
    CHECK(half[0] == 0.5f);
    CHECK(half[1] == 2.5f);
    CHECK(resize_bilinear(ramp, 4) == ramp);
    const auto flat = resize_bilinear(Tensor<float>({1, 5, 5}, 42.0f), 3);
    for (float v : flat.data()) CHECK(v == doctest::Approx(42.0f));
  }

  TEST_CASE("preprocess: crop then resize, dedupe, additive counts, size floor") {
    const auto wide = pixel_image(1, 48, 64, 5);
    const auto ds = preprocess({labeled(wide, 0, "w")}, PreprocessConfig{.side = 32});
    CHECK(ds.manifest.side == 32);
    CHECK(ds.pixels == quantize_pixels(resize_bilinear(center_crop_square(wide), 32)));

    const auto img = pixel_image(1, 16, 16, 6);
    PreprocessConfig dedupe{.side = 16, .dedupe = true};
    CHECK(preprocess({labeled(img, 1, "a"), labeled(img, 1, "b")}, dedupe).size() == 1);

    std::vector<LabeledImage> merged;
    for (int i = 0; i < 5; ++i) merged.push_back(labeled(pixel_image(1, 16, 16, 20 + i), 0, std::to_string(i)));
    const auto counts = preprocess(merged, PreprocessConfig{.side = 16}).manifest.label_counts();
    CHECK(counts[0] == 5);
    CHECK(format_count_table(preprocess(merged, PreprocessConfig{.side = 16}).manifest).find("Anger") == 0);

    std::string msg;
    CHECK(error_kind_of([&] { preprocess({labeled(pixel_image(1, 7, 9, 1), 0, "tiny.pgm")}, {}); }, &msg) ==
          ErrorKind::kInvalidArgument);
    CHECK(msg.find("tiny.pgm") != std::string::npos);
  }

  TEST_CASE("count table lists every class in canonical order") {
    std::vector<LabeledImage> imgs;
    for (std::size_t l : {6u, 0u, 3u, 3u}) imgs.push_back(labeled(pixel_image(1, 8, 8, l * 7 + imgs.size()), l, "x"));
    const auto table = format_count_table(preprocess(imgs, PreprocessConfig{.side = 8}).manifest);
    std::size_t pos = 0;
    for (const auto& name : emotion_class_names()) {
      const auto at = table.find(name, pos);
      REQUIRE(at != std::string::npos);
      pos = at;
    }
    CHECK(table.find("Happy") < table.find("Neutral"));
  }

  TEST_CASE("manifest save/load, tallies, disjoint splits and determinism") {
    TempDir dir("manifest");
    std::vector<LabeledImage> imgs;
    for (std::size_t i = 0; i < 60; ++i) imgs.push_back(labeled(pixel_image(1, 12, 12, 100 + i), i % 7, "s" + std::to_string(i)));
    PreprocessConfig cfg{.side = 8, .val_fraction = 0.2, .test_fraction = 0.2, .seed = 9};
    const auto a = preprocess(imgs, cfg);
    const auto b = preprocess(imgs, cfg);
    CHECK(a.manifest.checksum == b.manifest.checksum);
    CHECK(a.manifest.records == b.manifest.records);

    const auto sc = a.manifest.split_counts();
    CHECK(sc.at(Split::kTrain) + sc.at(Split::kVal) + sc.at(Split::kTest) == 60);
    CHECK(sc.at(Split::kVal) > 0);
    CHECK(sc.at(Split::kTest) > 0);

    save_dataset(a, dir / "manifest.json");
    const auto back = load_dataset(dir / "manifest.json");
    CHECK(back.manifest.records == a.manifest.records);
    CHECK(back.pixels == a.pixels);
    CHECK(back.image(3) == a.image(3));

    std::set<std::string> seen;
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
      for (std::size_t i : back.indices(s)) CHECK(seen.insert(back.manifest.records[i].locator).second);

    std::vector<std::size_t> tally(7, 0);
    for (const auto& r : back.manifest.records) ++tally[*r.label];
    CHECK(back.manifest.label_counts() == tally);

    auto store = slurp(dir / "pixels.bin");
    store[5] ^= 1;
    write_text(dir / "pixels.bin", store);
    std::string msg;
    CHECK(error_kind_of([&] { load_dataset(dir / "manifest.json"); }, &msg) == ErrorKind::kFormat);
    CHECK(msg.find("checksum") != std::string::npos);
  }

  TEST_CASE("model input conversion") {
    Tensor<float> px({1, 1, 2});
    px[0] = 0;
    px[1] = 255;
    const auto e = to_model_input<double>(px, false, nullptr);
    CHECK(e[0] == -0.99609375);
    CHECK(e[1] == 0.99609375);

    std::mt19937_64 rng(3);
    Tensor<float> all({1, 16, 16});
    for (std::size_t i = 0; i < 256; ++i) all[i] = static_cast<float>(i);
    for (int rep = 0; rep < 20; ++rep) {
      const auto t = to_model_input<float>(all, true, &rng);
      for (std::size_t p = 0; p < 256; ++p) {
        CHECK(t[p] >= (static_cast<double>(p) - 128) / 128);
        CHECK(t[p] < (static_cast<double>(p) - 127) / 128);
      }
    }
    CHECK(error_kind_of([&] { to_model_input<float>(all, true, nullptr); }) == ErrorKind::kInvalidArgument);
  }

  TEST_CASE("pixel conversion") {
    CHECK(to_pixel(-1.5) == 0);
    CHECK(to_pixel(0.0) == 128);
    CHECK(to_pixel(3.0) == 255);
    Tensor<float> all({1, 16, 16});
    for (std::size_t i = 0; i < 256; ++i) all[i] = static_cast<float>(i);
    const auto f = to_image(to_model_input<float>(all, false, nullptr));
    const auto d = to_image(to_model_input<double>(all, false, nullptr));
    for (std::size_t p = 0; p < 256; ++p) {
      CHECK(f[p] == p);
      CHECK(d[p] == p);
    }
  }

  TEST_CASE("split names") {
    CHECK(parse_split("train") == Split::kTrain);
    CHECK(parse_split("Training") == Split::kTrain);
    CHECK(parse_split("PublicTest") == Split::kVal);
    CHECK(parse_split("PrivateTest") == Split::kTest);
    CHECK(error_kind_of([] { parse_split("holdout"); }) == ErrorKind::kInvalidArgument);
  }
}
