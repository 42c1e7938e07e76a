#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "paka/types.hpp"
#include "paka/view_geometry.hpp"

namespace paka {

struct SceneSpec {
  int size = 64;          // square image side in pixels
  int classes = 4;        // background (0) plus classes-1 shape classes
  int min_shapes = 1;
  int max_shapes = 4;
  int patch_size = 8;
  double color_jitter = 0.12;       // per-instance, per-channel uniform jitter amplitude
  double background_texture = 0.06;  // amplitude of the background noise texture
  std::uint64_t seed = 0;
};

void validate(const SceneSpec& spec);

enum class ShapeKind { kRectangle, kCircle, kTriangle };

struct ShapeInstance {
  ShapeKind kind = ShapeKind::kRectangle;
  int label = 1;
  // Rectangle: [x0,x1) x [y0,y1). Circle: centre (cx,cy), radius r. Triangle: vertices.
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double cx = 0, cy = 0, r = 0;
  std::array<double, 6> tri{};

  // Whether the pixel centre (px+0.5, py+0.5) falls inside the shape.
  bool contains(int px, int py) const;
};

struct Sample {
  Image image;
  LabelMask mask;
};

struct Scene {
  Sample sample;
  std::vector<ShapeInstance> shapes;  // painting order; later shapes occlude earlier ones
};

// Fully determined by (spec.seed, index).
Scene generate_scene_detailed(const SceneSpec& spec, std::uint64_t index);
Sample generate_scene(const SceneSpec& spec, std::uint64_t index);

// Base RGB colour of a class; class 0 is the background.
std::array<double, 3> class_color(int label);

struct AugmentParams {
  double jitter = 0.4;        // brightness/contrast/saturation amplitude at s = 1
  double blur_sigma = 2.0;    // Gaussian blur sigma at s = 1
  double blur_prob = 0.5;     // blur probability at s >= 0.5, linear below
  double noise_std = 0.05;    // additive pixel noise std at s = 1
};

// Photometric augmentation of strength s in [0,1]; s = 0 returns the input unchanged.
Image augment(const Image& image, double strength, Rng& rng, const AugmentParams& params = {});

// Resamples the part of `image` inside `box` to out_h x out_w by bilinear interpolation.
Image crop_resize(const Image& image, const CropBox& box, int out_h, int out_w);

struct Dataset {
  int size = 0;
  int classes = 0;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  bool empty() const { return samples.empty(); }
};

Dataset make_dataset(const SceneSpec& spec, int count, std::uint64_t first_index = 0);

// images/NNNNNN.png (8-bit RGB), masks/NNNNNN.png (8-bit class ids), manifest.json.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace paka
