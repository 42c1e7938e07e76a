#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

#include "doctest.h"
#include "paka/data_synth.hpp"
#include "paka/error.hpp"
#include "test_util.hpp"

using namespace paka;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInvalidArgument;
}

double distortion(const Image& a, const Image& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) s += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
  return std::sqrt(s / static_cast<double>(a.pixels.size()));
}

}  // namespace

TEST_CASE("generate_scene is determined by seed and index") {
  SceneSpec spec;
  spec.seed = 11;
  const Sample a = generate_scene(spec, 5), b = generate_scene(spec, 5);
  CHECK(a.image == b.image);
  CHECK(a.mask == b.mask);
  CHECK_FALSE(generate_scene(spec, 6).image == a.image);
  spec.seed = 12;
  CHECK_FALSE(generate_scene(spec, 5).image == a.image);
  // Generation order never matters.
  spec.seed = 11;
  const Dataset ds = make_dataset(spec, 3, 4);
  CHECK(ds.samples[1].image == a.image);
}

TEST_CASE("zero shapes gives an all-background mask") {
  SceneSpec spec;
  spec.min_shapes = spec.max_shapes = 0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Sample s = generate_scene(spec, i);
    for (int id : s.mask.ids) CHECK(id == 0);
  }
}

TEST_CASE("1000 scenes respect the label and range contract and label/shape consistency") {
  SceneSpec spec;
  spec.seed = 3;
  spec.classes = 5;
  spec.max_shapes = 5;
  int bad_ids = 0, bad_pixels = 0, inconsistent = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Scene sc = generate_scene_detailed(spec, i);
    for (int id : sc.sample.mask.ids) bad_ids += (id < 0 || id >= spec.classes);
    for (double v : sc.sample.image.pixels) bad_pixels += !(v >= 0.0 && v <= 1.0);
    CHECK(static_cast<int>(sc.shapes.size()) >= spec.min_shapes);
    CHECK(static_cast<int>(sc.shapes.size()) <= spec.max_shapes);
    for (int y = 0; y < spec.size; ++y)
      for (int x = 0; x < spec.size; ++x) {
        const int c = sc.sample.mask.at(y, x);
        if (c == 0) continue;
        bool covered = false;
        for (const ShapeInstance& s : sc.shapes) covered |= (s.label == c && s.contains(x, y));
        inconsistent += !covered;
      }
  }
  CHECK(bad_ids == 0);
  CHECK(bad_pixels == 0);
  CHECK(inconsistent == 0);
}

TEST_CASE("later shapes occlude earlier ones") {
  SceneSpec spec;
  spec.max_shapes = 5;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Scene sc = generate_scene_detailed(spec, i);
    for (int y = 0; y < spec.size; ++y)
      for (int x = 0; x < spec.size; ++x) {
        int expected = 0;
        for (const ShapeInstance& s : sc.shapes)
          if (s.contains(x, y)) expected = s.label;
        CHECK(sc.sample.mask.at(y, x) == expected);
      }
  }
}

TEST_CASE("SceneSpec validation") {
  SceneSpec spec;
  spec.classes = 1;
  CHECK(code_of([&] { validate(spec); }) == ErrorCode::kInvalidArgument);
  spec = {};
  spec.size = 24;  // smaller than four patches of 8
  CHECK(code_of([&] { validate(spec); }) == ErrorCode::kInvalidArgument);
  spec = {};
  spec.size = 68;
  CHECK(code_of([&] { validate(spec); }) == ErrorCode::kInvalidArgument);
  spec = {};
  spec.min_shapes = 3;
  spec.max_shapes = 2;
  CHECK(code_of([&] { validate(spec); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { make_dataset(SceneSpec{}, 0); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("augment: identity at zero, determinism, range, constant image bound") {
  const Sample s = generate_scene(SceneSpec{}, 0);
  Rng rng(1);
  const Image same = augment(s.image, 0.0, rng);
  CHECK(same == s.image);

  Rng r1(7), r2(7);
  CHECK(augment(s.image, 0.7, r1) == augment(s.image, 0.7, r2));

  Rng r3(8);
  for (int t = 0; t < 50; ++t) {
    const Image out = augment(s.image, 1.0, r3);
    for (double v : out.pixels) CHECK((v >= 0.0 && v <= 1.0));
  }

  // Constant mid-grey: contrast and saturation have nothing to act on, blur keeps a constant,
  // so only brightness (±0.4) and noise remain. The mean moves by at most the jitter amplitude.
  Image grey(3, 32, 32);
  for (double& v : grey.pixels) v = 0.5;
  Rng r4(9);
  for (int t = 0; t < 100; ++t) {
    const Image out = augment(grey, 1.0, r4);
    double mean = 0.0;
    for (double v : out.pixels) mean += v;
    mean /= static_cast<double>(out.pixels.size());
    CHECK(std::abs(mean - 0.5) <= 0.5 * AugmentParams{}.jitter + 0.01);
  }
  CHECK(code_of([&] { augment(grey, 1.5, r4); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { augment(grey, -0.1, r4); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("augmentation distortion is non-decreasing in strength") {
  SceneSpec spec;
  spec.seed = 5;
  const double strengths[] = {0.0, 0.25, 0.5, 1.0};
  double mean[4] = {0, 0, 0, 0};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Sample s = generate_scene(spec, seed);
    for (int k = 0; k < 4; ++k) {
      Rng rng(derive_seed(seed, "augment-test"));
      mean[k] += distortion(augment(s.image, strengths[k], rng), s.image) / 100.0;
    }
  }
  CHECK(mean[0] == 0.0);
  CHECK(mean[1] <= mean[2]);
  CHECK(mean[2] <= mean[3]);
  CHECK(mean[0] <= mean[1]);
}

TEST_CASE("augment never touches the mask and crop_resize matches the full image at the unit box") {
  const Sample s = generate_scene(SceneSpec{}, 2);
  const LabelMask before = s.mask;
  Rng rng(3);
  (void)augment(s.image, 1.0, rng);
  CHECK(s.mask == before);

  const Image full = crop_resize(s.image, CropBox{0, 0, 1, 1}, s.image.height, s.image.width);
  CHECK(full == s.image);
  const Image half = crop_resize(s.image, CropBox{0, 0, 0.5, 0.5}, 16, 16);
  // Downsampling by 2 samples halfway between source pixels.
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const double expected = 0.25 * (s.image.at(c, 2 * y, 2 * x) + s.image.at(c, 2 * y, 2 * x + 1) +
                                        s.image.at(c, 2 * y + 1, 2 * x) + s.image.at(c, 2 * y + 1, 2 * x + 1));
        CHECK(std::abs(half.at(c, y, x) - expected) <= 1e-12);
      }
  CHECK(code_of([&] { crop_resize(s.image, CropBox{0, 0, 1, 1}, 0, 4); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("dataset round trip: exact masks, images within 8-bit quantization") {
  const auto dir = test::scratch_dir("dataset_roundtrip");
  SceneSpec spec;
  spec.seed = 21;
  spec.size = 32;
  spec.patch_size = 4;
  const Dataset ds = make_dataset(spec, 6);
  write_dataset(ds, dir / "ds");
  CHECK(std::filesystem::exists(dir / "ds" / "images" / "000000.png"));
  CHECK(std::filesystem::exists(dir / "ds" / "masks" / "000005.png"));
  CHECK(std::filesystem::exists(dir / "ds" / "manifest.json"));
  const Dataset back = read_dataset(dir / "ds");
  CHECK(back.size == 32);
  CHECK(back.classes == spec.classes);
  CHECK(back.seed == 21);
  REQUIRE(back.samples.size() == ds.samples.size());
  double worst = 0.0;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].mask == ds.samples[i].mask);
    for (size_t k = 0; k < ds.samples[i].image.pixels.size(); ++k)
      worst = std::max(worst, std::abs(back.samples[i].image.pixels[k] - ds.samples[i].image.pixels[k]));
  }
  CHECK(worst <= 1.0 / 255.0 + 1e-9);
}

TEST_CASE("dataset read errors") {
  const auto dir = test::scratch_dir("dataset_errors");
  std::filesystem::create_directories(dir / "empty");
  CHECK(code_of([&] { read_dataset(dir / "empty"); }) == ErrorCode::kEmptyDataset);
  CHECK(code_of([&] { read_dataset(dir / "nope"); }) == ErrorCode::kIoError);

  SceneSpec spec;
  spec.size = 32;
  spec.patch_size = 4;
  write_dataset(make_dataset(spec, 2), dir / "ds");
  {
    std::ofstream os(dir / "ds" / "images" / "000001.png", std::ios::binary | std::ios::trunc);
    os << "not a png";
  }
  try {
    read_dataset(dir / "ds");
    FAIL("expected CorruptFile");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kCorruptFile);
    CHECK(std::string(e.what()).find("000001.png") != std::string::npos);
  }
  {
    std::ofstream os(dir / "ds" / "manifest.json", std::ios::trunc);
    os << "{ broken";
  }
  CHECK(code_of([&] { read_dataset(dir / "ds"); }) == ErrorCode::kCorruptFile);
}
