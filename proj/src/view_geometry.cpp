#include "paka/view_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "paka/error.hpp"

namespace paka {
namespace {

constexpr double kMinAspect = 3.0 / 4.0;
constexpr double kMaxAspect = 4.0 / 3.0;

void require_scale(ScaleRange scale) {
  require(scale.lo > 0.0 && scale.lo <= scale.hi && scale.hi <= 1.0, ErrorCode::kInvalidArgument,
          "scale range must satisfy 0 < lo <= hi <= 1");
}

// Box with area fraction drawn from `scale`, aspect ratio (w/h) log-uniform in [3/4, 4/3]
// restricted to what fits in the unit square, and position uniform.
CropBox sample_box(Rng& rng, ScaleRange scale) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double area = scale.lo + (scale.hi - scale.lo) * unit(rng);
  // w = sqrt(area*r) <= 1 and h = sqrt(area/r) <= 1 require area <= r <= 1/area.
  const double log_lo = std::log(std::max(kMinAspect, area));
  const double log_hi = std::log(std::min(kMaxAspect, 1.0 / area));
  const double ratio = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
  const double w = std::min(1.0, std::sqrt(area * ratio));
  const double h = std::min(1.0, std::sqrt(area / ratio));
  const double x0 = (1.0 - w) * unit(rng);
  const double y0 = (1.0 - h) * unit(rng);
  return {x0, y0, std::min(1.0, x0 + w), std::min(1.0, y0 + h)};
}

bool satisfies(const CropBox& box, std::span<const CropBox> globals, double min_overlap) {
  return std::all_of(globals.begin(), globals.end(),
                     [&](const CropBox& g) { return overlap_ratio(box, g) >= min_overlap; });
}

void interp_coord(double pos, int size, int& lo, int& hi, double& frac) {
  pos = std::clamp(pos, 0.0, static_cast<double>(size - 1));
  lo = static_cast<int>(std::floor(pos));
  hi = std::min(lo + 1, size - 1);
  frac = pos - lo;
}

// Continuous input-grid coordinate of output cell `i` (cell centres sit at integer positions).
double sample_pos(double box_lo, double box_extent, int in_size, int out_size, int i) {
  return box_lo * in_size + (i + 0.5) * (box_extent * in_size / out_size) - 0.5;
}

}  // namespace

bool CropBox::valid() const {
  return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) && x0 >= 0.0 &&
         y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 && x0 < x1 && y0 < y1;
}

std::optional<CropBox> intersect(const CropBox& a, const CropBox& b) {
  const CropBox r{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  if (r.x0 < r.x1 && r.y0 < r.y1) return r;
  return std::nullopt;
}

double overlap_ratio(const CropBox& local, const CropBox& global) {
  require(local.valid() && global.valid(), ErrorCode::kInvalidArgument, "invalid crop box");
  const auto inter = intersect(local, global);
  if (!inter) return 0.0;
  return std::min(1.0, inter->area() / local.area());
}

CropBox sample_global_crop(Rng& rng, ScaleRange scale) {
  require_scale(scale);
  return sample_box(rng, scale);
}

CropBox sample_local_crop_minoverlap(Rng& rng, std::span<const CropBox> globals, ScaleRange scale,
                                     double min_overlap, int max_tries) {
  require_scale(scale);
  require(max_tries >= 1, ErrorCode::kInvalidArgument, "max_tries must be >= 1");
  require(min_overlap >= 0.0 && min_overlap <= 1.0, ErrorCode::kInvalidArgument, "min overlap must lie in [0,1]");

  std::optional<CropBox> common = CropBox::unit();
  for (const CropBox& g : globals) {
    require(g.valid(), ErrorCode::kInvalidArgument, "invalid global crop");
    common = intersect(*common, g);
    if (!common) break;
  }
  if (min_overlap > 0.0 && !common) fail(ErrorCode::kInfeasibleConstraint, "global crops share no common region");

  CropBox box;
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    box = sample_box(rng, scale);
    if (satisfies(box, globals, min_overlap)) return box;
  }

  // Deterministic fallback: start from the last sampled size and shrink about the centroid of
  // the common region. Once the box fits inside that region every ratio is 1.
  const double cx = 0.5 * (common->x0 + common->x1);
  const double cy = 0.5 * (common->y0 + common->y1);
  double w = box.width();
  double h = box.height();
  for (;;) {
    const double half_w = std::min(0.5 * w, std::min(cx, 1.0 - cx));
    const double half_h = std::min(0.5 * h, std::min(cy, 1.0 - cy));
    CropBox candidate{cx - half_w, cy - half_h, cx + half_w, cy + half_h};
    if (candidate.valid() && satisfies(candidate, globals, min_overlap)) return candidate;
    w *= 0.9;
    h *= 0.9;
    if (w <= common->width() && h <= common->height()) {
      return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    }
  }
}

CropBox box_in_view_coords(const CropBox& inner, const CropBox& view) {
  const auto inter = intersect(inner, view);
  if (!inter) fail(ErrorCode::kEmptyIntersection, "box does not overlap the view");
  const double sx = 1.0 / view.width();
  const double sy = 1.0 / view.height();
  CropBox out{(inter->x0 - view.x0) * sx, (inter->y0 - view.y0) * sy, (inter->x1 - view.x0) * sx,
              (inter->y1 - view.y0) * sy};
  out.x0 = std::clamp(out.x0, 0.0, 1.0);
  out.y0 = std::clamp(out.y0, 0.0, 1.0);
  out.x1 = std::clamp(out.x1, 0.0, 1.0);
  out.y1 = std::clamp(out.y1, 0.0, 1.0);
  return out;
}

FeatureGrid roi_align(const FeatureGrid& grid, const CropBox& box, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, ErrorCode::kInvalidArgument, "output dims must be positive");
  require(grid.height >= 1 && grid.width >= 1, ErrorCode::kInvalidArgument, "empty grid");
  const int d = grid.dim();
  FeatureGrid out(out_h, out_w, d);
  for (int i = 0; i < out_h; ++i) {
    int y_lo, y_hi;
    double fy;
    interp_coord(sample_pos(box.y0, box.height(), grid.height, out_h, i), grid.height, y_lo, y_hi, fy);
    for (int j = 0; j < out_w; ++j) {
      int x_lo, x_hi;
      double fx;
      interp_coord(sample_pos(box.x0, box.width(), grid.width, out_w, j), grid.width, x_lo, x_hi, fx);
      const double w00 = (1.0 - fy) * (1.0 - fx);
      const double w01 = (1.0 - fy) * fx;
      const double w10 = fy * (1.0 - fx);
      const double w11 = fy * fx;
      const auto r00 = grid.features.row(y_lo * grid.width + x_lo);
      const auto r01 = grid.features.row(y_lo * grid.width + x_hi);
      const auto r10 = grid.features.row(y_hi * grid.width + x_lo);
      const auto r11 = grid.features.row(y_hi * grid.width + x_hi);
      out.features.row(i * out_w + j) = w00 * r00 + w01 * r01 + w10 * r10 + w11 * r11;
    }
  }
  return out;
}

FeatureGrid roi_align_backward(const FeatureGrid& grad_out, const CropBox& box, int in_h, int in_w) {
  require(in_h >= 1 && in_w >= 1, ErrorCode::kInvalidArgument, "input dims must be positive");
  const int out_h = grad_out.height;
  const int out_w = grad_out.width;
  FeatureGrid grad_in(in_h, in_w, grad_out.dim());
  for (int i = 0; i < out_h; ++i) {
    int y_lo, y_hi;
    double fy;
    interp_coord(sample_pos(box.y0, box.height(), in_h, out_h, i), in_h, y_lo, y_hi, fy);
    for (int j = 0; j < out_w; ++j) {
      int x_lo, x_hi;
      double fx;
      interp_coord(sample_pos(box.x0, box.width(), in_w, out_w, j), in_w, x_lo, x_hi, fx);
      const auto g = grad_out.features.row(i * out_w + j);
      grad_in.features.row(y_lo * in_w + x_lo) += (1.0 - fy) * (1.0 - fx) * g;
      grad_in.features.row(y_lo * in_w + x_hi) += (1.0 - fy) * fx * g;
      grad_in.features.row(y_hi * in_w + x_lo) += fy * (1.0 - fx) * g;
      grad_in.features.row(y_hi * in_w + x_hi) += fy * fx * g;
    }
  }
  return grad_in;
}

FeatureMatrix flatten_grid(const FeatureGrid& grid) { return grid.features; }

FeatureGrid reshape_to_grid(const FeatureMatrix& rows, int height, int width) {
  require(rows.rows() == static_cast<Eigen::Index>(height) * width, ErrorCode::kShapeMismatch,
          "row count does not match grid dims");
  FeatureGrid g;
  g.height = height;
  g.width = width;
  g.features = rows;
  return g;
}

}  // namespace paka
