#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace paka {

// N x D patch embeddings; row i is one patch.
using FeatureMatrix = Eigen::MatrixXd;
// N x N Gram (or centered Gram) matrix.
using KernelMatrix = Eigen::MatrixXd;

using Rng = std::mt19937_64;

// Dense H x W x D feature map stored as an (H*W) x D matrix, row index y*W + x.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  Eigen::MatrixXd features;

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int d) : height(h), width(w), features(Eigen::MatrixXd::Zero(h * w, d)) {}

  int dim() const { return static_cast<int>(features.cols()); }
  int cells() const { return height * width; }
  double& at(int y, int x, int c) { return features(y * width + x, c); }
  double at(int y, int x, int c) const { return features(y * width + x, c); }
};

// Channel-major C x H x W image with values nominally in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), pixels(static_cast<size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) { return pixels[(static_cast<size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return pixels[(static_cast<size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

// Per-pixel integer class ids.
struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<int> ids;

  LabelMask() = default;
  LabelMask(int h, int w, int fill = 0) : height(h), width(w), ids(static_cast<size_t>(h) * w, fill) {}

  int& at(int y, int x) { return ids[static_cast<size_t>(y) * width + x]; }
  int at(int y, int x) const { return ids[static_cast<size_t>(y) * width + x]; }
  bool operator==(const LabelMask&) const = default;
};

// splitmix64 finalizer; used to derive independent per-subsystem seeds from one root.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char ch : tag) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  return mix_seed(mix_seed(root ^ h) + index);
}

inline bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

}  // namespace paka
