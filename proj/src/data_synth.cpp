#include "paka/data_synth.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <string>

#include "json.hpp"
#include "paka/error.hpp"

namespace paka {
namespace {

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

ShapeInstance random_shape(Rng& rng, int size, int label) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> kind_dist(0, 2);
  ShapeInstance s;
  s.label = label;
  s.kind = static_cast<ShapeKind>(kind_dist(rng));
  const double lo = size / 8.0;
  const double hi = size / 2.5;
  const double w = lo + (hi - lo) * unit(rng);
  const double h = lo + (hi - lo) * unit(rng);
  const double x0 = (size - w) * unit(rng);
  const double y0 = (size - h) * unit(rng);
  switch (s.kind) {
    case ShapeKind::kRectangle:
      s.x0 = x0, s.y0 = y0, s.x1 = x0 + w, s.y1 = y0 + h;
      break;
    case ShapeKind::kCircle:
      s.r = 0.5 * std::min(w, h);
      s.cx = x0 + 0.5 * w, s.cy = y0 + 0.5 * h;
      break;
    case ShapeKind::kTriangle:
      // Apex on the top edge, base on the bottom edge of the bounding box.
      s.tri = {x0 + w * unit(rng), y0, x0, y0 + h, x0 + w, y0 + h};
      break;
  }
  return s;
}

std::string indexed_name(size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu.png", i);
  return buf;
}

void write_png(const std::filesystem::path& path, const std::vector<unsigned char>& bytes, int w, int h, bool rgb) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorCode::kIoError, "cannot write " + path.string() + ": " + msg);
  }
}

std::vector<unsigned char> read_png(const std::filesystem::path& path, bool rgb, int& w, int& h) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    const std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorCode::kCorruptFile, path.string() + ": " + msg);
  }
  img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorCode::kCorruptFile, path.string() + ": " + msg);
  }
  w = static_cast<int>(img.width);
  h = static_cast<int>(img.height);
  return bytes;
}

std::vector<double> gaussian_taps(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> taps(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += taps[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& t : taps) t /= sum;
  return taps;
}

void blur_in_place(Image& img, double sigma) {
  const std::vector<double> taps = gaussian_taps(sigma);
  const int r = static_cast<int>(taps.size() / 2);
  std::vector<double> tmp(img.pixels.size());
  auto idx = [&](int c, int y, int x) { return (static_cast<size_t>(c) * img.height + y) * img.width + x; };
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) acc += taps[k + r] * img.at(c, y, std::clamp(x + k, 0, img.width - 1));
        tmp[idx(c, y, x)] = acc;
      }
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) acc += taps[k + r] * tmp[idx(c, std::clamp(y + k, 0, img.height - 1), x)];
        img.at(c, y, x) = acc;
      }
}

}  // namespace

void validate(const SceneSpec& spec) {
  require(spec.classes >= 2, ErrorCode::kInvalidArgument, "need at least 2 classes");
  require(spec.classes <= 256, ErrorCode::kInvalidArgument, "class ids must fit in 8 bits");
  require(spec.patch_size >= 1 && spec.size % spec.patch_size == 0, ErrorCode::kInvalidArgument,
          "image size must be divisible by the patch size");
  require(spec.size >= 4 * spec.patch_size, ErrorCode::kInvalidArgument, "image size must be at least 4 patches");
  require(spec.min_shapes >= 0 && spec.min_shapes <= spec.max_shapes, ErrorCode::kInvalidArgument,
          "invalid shape count range");
  require(spec.color_jitter >= 0.0 && spec.background_texture >= 0.0, ErrorCode::kInvalidArgument,
          "amplitudes must be non-negative");
}

bool ShapeInstance::contains(int px, int py) const {
  const double x = px + 0.5;
  const double y = py + 0.5;
  switch (kind) {
    case ShapeKind::kRectangle:
      return x >= x0 && x < x1 && y >= y0 && y < y1;
    case ShapeKind::kCircle:
      return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
    case ShapeKind::kTriangle: {
      const double d0 = edge(tri[0], tri[1], tri[2], tri[3], x, y);
      const double d1 = edge(tri[2], tri[3], tri[4], tri[5], x, y);
      const double d2 = edge(tri[4], tri[5], tri[0], tri[1], x, y);
      const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(has_neg && has_pos);
    }
  }
  return false;
}

std::array<double, 3> class_color(int label) {
  static constexpr std::array<std::array<double, 3>, 8> kPalette{{
      {0.45, 0.45, 0.45},
      {0.85, 0.25, 0.20},
      {0.25, 0.75, 0.30},
      {0.20, 0.35, 0.85},
      {0.90, 0.80, 0.20},
      {0.80, 0.30, 0.80},
      {0.20, 0.80, 0.80},
      {0.95, 0.55, 0.15},
  }};
  if (label >= 0 && label < static_cast<int>(kPalette.size())) return kPalette[static_cast<size_t>(label)];
  // Beyond the palette: hue spread by the golden angle.
  const double hue = std::fmod(label * 0.618033988749895, 1.0) * 2.0 * std::numbers::pi;
  return {0.5 + 0.35 * std::cos(hue), 0.5 + 0.35 * std::cos(hue - 2.094), 0.5 + 0.35 * std::cos(hue + 2.094)};
}

Scene generate_scene_detailed(const SceneSpec& spec, std::uint64_t index) {
  validate(spec);
  Rng rng(derive_seed(spec.seed, "scene", index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = spec.size;
  Scene scene;
  Image& img = scene.sample.image;
  img = Image(3, n, n);
  scene.sample.mask = LabelMask(n, n, 0);

  // Background: base colour modulated by two random low-frequency waves.
  const auto bg = class_color(0);
  const double fx = 1.0 + 3.0 * unit(rng), fy = 1.0 + 3.0 * unit(rng);
  const double phx = 2.0 * std::numbers::pi * unit(rng), phy = 2.0 * std::numbers::pi * unit(rng);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double wave = 0.5 * (std::sin(2.0 * std::numbers::pi * fx * x / n + phx) +
                                 std::sin(2.0 * std::numbers::pi * fy * y / n + phy));
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = bg[static_cast<size_t>(c)] + spec.background_texture * wave;
    }

  std::uniform_int_distribution<int> count_dist(spec.min_shapes, spec.max_shapes);
  std::uniform_int_distribution<int> label_dist(1, spec.classes - 1);
  const int count = count_dist(rng);
  for (int k = 0; k < count; ++k) {
    ShapeInstance shape = random_shape(rng, n, label_dist(rng));
    auto color = class_color(shape.label);
    for (double& ch : color) ch = std::clamp(ch + spec.color_jitter * (2.0 * unit(rng) - 1.0), 0.0, 1.0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        if (!shape.contains(x, y)) continue;
        scene.sample.mask.at(y, x) = shape.label;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[static_cast<size_t>(c)];
      }
    scene.shapes.push_back(shape);
  }

  // Fine per-pixel grain over everything.
  const double grain = 0.5 * spec.background_texture;
  for (double& v : img.pixels) v = std::clamp(v + grain * (2.0 * unit(rng) - 1.0), 0.0, 1.0);
  return scene;
}

Sample generate_scene(const SceneSpec& spec, std::uint64_t index) {
  return std::move(generate_scene_detailed(spec, index).sample);
}

Image augment(const Image& image, double strength, Rng& rng, const AugmentParams& params) {
  require(strength >= 0.0 && strength <= 1.0, ErrorCode::kInvalidArgument, "augmentation strength must lie in [0,1]");
  if (strength == 0.0) return image;

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double amp = params.jitter * strength;
  const double brightness = 1.0 + amp * (2.0 * unit(rng) - 1.0);
  const double contrast = 1.0 + amp * (2.0 * unit(rng) - 1.0);
  const double saturation = 1.0 + amp * (2.0 * unit(rng) - 1.0);
  const bool do_blur = unit(rng) < params.blur_prob * std::min(1.0, 2.0 * strength);
  const double sigma = params.blur_sigma * strength;

  Image out = image;
  for (double& v : out.pixels) v *= brightness;

  const size_t plane = static_cast<size_t>(out.height) * out.width;
  auto gray_at = [&](size_t p) {
    if (out.channels != 3) return out.pixels[p];
    return 0.299 * out.pixels[p] + 0.587 * out.pixels[plane + p] + 0.114 * out.pixels[2 * plane + p];
  };
  double mean_gray = 0.0;
  for (size_t p = 0; p < plane; ++p) mean_gray += gray_at(p);
  mean_gray /= static_cast<double>(plane);
  for (double& v : out.pixels) v = (v - mean_gray) * contrast + mean_gray;

  if (out.channels == 3) {
    for (size_t p = 0; p < plane; ++p) {
      const double g = gray_at(p);
      for (int c = 0; c < 3; ++c) {
        double& v = out.pixels[c * plane + p];
        v = g + (v - g) * saturation;
      }
    }
  }
  for (double& v : out.pixels) v = std::clamp(v, 0.0, 1.0);

  if (do_blur && sigma > 1e-3) blur_in_place(out, sigma);

  const double noise_std = params.noise_std * strength;
  if (noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_std);
    for (double& v : out.pixels) v += noise(rng);
  }
  for (double& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Image crop_resize(const Image& image, const CropBox& box, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, ErrorCode::kInvalidArgument, "output dims must be positive");
  Image out(image.channels, out_h, out_w);
  const double step_y = box.height() * image.height / out_h;
  const double step_x = box.width() * image.width / out_w;
  for (int i = 0; i < out_h; ++i) {
    const double sy = std::clamp(box.y0 * image.height + (i + 0.5) * step_y - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (int j = 0; j < out_w; ++j) {
      const double sx = std::clamp(box.x0 * image.width + (j + 0.5) * step_x - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - x0;
      for (int c = 0; c < image.channels; ++c) {
        out.at(c, i, j) = (1 - fy) * ((1 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1)) +
                          fy * ((1 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1));
      }
    }
  }
  return out;
}

Dataset make_dataset(const SceneSpec& spec, int count, std::uint64_t first_index) {
  require(count >= 1, ErrorCode::kInvalidArgument, "dataset count must be >= 1");
  Dataset ds;
  ds.size = spec.size;
  ds.classes = spec.classes;
  ds.seed = spec.seed;
  ds.samples.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) ds.samples.push_back(generate_scene(spec, first_index + static_cast<std::uint64_t>(i)));
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  require(!dataset.empty(), ErrorCode::kEmptyDataset, "refusing to write an empty dataset");
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) fail(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());

  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    require(s.image.channels == 3, ErrorCode::kShapeMismatch, "dataset images must be RGB");
    const int h = s.image.height, w = s.image.width;
    std::vector<unsigned char> rgb(static_cast<size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          rgb[(static_cast<size_t>(y) * w + x) * 3 + c] =
              static_cast<unsigned char>(std::lround(std::clamp(s.image.at(c, y, x), 0.0, 1.0) * 255.0));
    write_png(dir / "images" / indexed_name(i), rgb, w, h, true);

    std::vector<unsigned char> ids(s.mask.ids.size());
    for (size_t k = 0; k < ids.size(); ++k) {
      require(s.mask.ids[k] >= 0 && s.mask.ids[k] < 256, ErrorCode::kInvalidArgument, "class id does not fit in 8 bits");
      ids[k] = static_cast<unsigned char>(s.mask.ids[k]);
    }
    write_png(dir / "masks" / indexed_name(i), ids, s.mask.width, s.mask.height, false);
  }

  nlohmann::json manifest = {{"count", dataset.samples.size()},
                             {"size", dataset.size},
                             {"classes", dataset.classes},
                             {"seed", dataset.seed}};
  std::ofstream os(dir / "manifest.json");
  if (!os) fail(ErrorCode::kIoError, "cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    if (std::filesystem::is_directory(dir)) fail(ErrorCode::kEmptyDataset, "no manifest.json in " + dir.string());
    fail(ErrorCode::kIoError, "dataset directory " + dir.string() + " does not exist");
  }
  nlohmann::json manifest;
  try {
    std::ifstream is(manifest_path);
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptFile, manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  size_t count = 0;
  try {
    count = manifest.at("count").get<size_t>();
    ds.size = manifest.at("size").get<int>();
    ds.classes = manifest.at("classes").get<int>();
    ds.seed = manifest.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptFile, manifest_path.string() + ": " + e.what());
  }
  if (count == 0) fail(ErrorCode::kEmptyDataset, "manifest lists no samples in " + dir.string());

  for (size_t i = 0; i < count; ++i) {
    Sample s;
    int w = 0, h = 0;
    const auto img_path = dir / "images" / indexed_name(i);
    const auto rgb = read_png(img_path, true, w, h);
    s.image = Image(3, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = rgb[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;

    int mw = 0, mh = 0;
    const auto mask_path = dir / "masks" / indexed_name(i);
    const auto ids = read_png(mask_path, false, mw, mh);
    if (mw != w || mh != h) fail(ErrorCode::kCorruptFile, mask_path.string() + ": mask size differs from image");
    s.mask = LabelMask(mh, mw);
    for (size_t k = 0; k < ids.size(); ++k) {
      if (ids[k] >= ds.classes) fail(ErrorCode::kCorruptFile, mask_path.string() + ": class id out of range");
      s.mask.ids[k] = ids[k];
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace paka
