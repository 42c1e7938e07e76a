#pragma once

#include <optional>
#include <span>

#include "paka/types.hpp"

namespace paka {

// Axis-aligned box in normalized [0,1]^2 coordinates, x to the right and y down.
struct CropBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const;
  bool operator==(const CropBox&) const = default;

  static CropBox unit() { return {0.0, 0.0, 1.0, 1.0}; }
};

struct ScaleRange {
  double lo = 0.4;
  double hi = 1.0;
};

struct ViewPair {
  CropBox teacher_box;
  CropBox student_box;
  int target_h = 4;
  int target_w = 4;
};

// Intersection, or nullopt when the boxes do not overlap with positive area.
std::optional<CropBox> intersect(const CropBox& a, const CropBox& b);

// Fraction of the local box covered by the global box.
double overlap_ratio(const CropBox& local, const CropBox& global);

CropBox sample_global_crop(Rng& rng, ScaleRange scale);

inline constexpr int kDefaultMaxTries = 100;

// Rejection-samples a crop whose overlap_ratio against every global is at least min_overlap.
// After max_tries it places a box at the centroid of the globals' common intersection and
// shrinks it until every constraint holds.
CropBox sample_local_crop_minoverlap(Rng& rng, std::span<const CropBox> globals, ScaleRange scale,
                                     double min_overlap, int max_tries = kDefaultMaxTries);

// The part of `inner` that falls inside `view`, expressed in view-relative [0,1]^2 coordinates.
CropBox box_in_view_coords(const CropBox& inner, const CropBox& view);

// Bilinear resample of `grid` over `box` onto an out_h x out_w grid. Each output cell reads the
// input once at its cell centre; sample positions are clamped to the input's cell-centre hull.
FeatureGrid roi_align(const FeatureGrid& grid, const CropBox& box, int out_h, int out_w);

// Adjoint of roi_align: scatters an output-grid gradient back onto an in_h x in_w input grid.
FeatureGrid roi_align_backward(const FeatureGrid& grad_out, const CropBox& box, int in_h, int in_w);

FeatureMatrix flatten_grid(const FeatureGrid& grid);
FeatureGrid reshape_to_grid(const FeatureMatrix& rows, int height, int width);

}  // namespace paka
