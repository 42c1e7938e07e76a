#include "paka/kernel_align.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "paka/error.hpp"

namespace paka {
namespace {

void require_finite(const FeatureMatrix& m, const char* what) {
  require(m.size() > 0, ErrorCode::kInvalidArgument, std::string(what) + " is empty");
  require(m.allFinite(), ErrorCode::kInvalidArgument, std::string(what) + " has non-finite entries");
}

void require_paired(const FeatureMatrix& s, const FeatureMatrix& t) {
  require_finite(s, "S");
  require_finite(t, "T");
  require(s.rows() == t.rows(), ErrorCode::kShapeMismatch,
          "S has " + std::to_string(s.rows()) + " rows, T has " + std::to_string(t.rows()));
}

FeatureMatrix center_columns(const FeatureMatrix& m) { return m.rowwise() - m.colwise().mean(); }

// Backpropagates a gradient taken w.r.t. row-normalized features onto the raw rows.
FeatureMatrix normalize_rows_backward(const FeatureMatrix& raw, const FeatureMatrix& unit, const FeatureMatrix& grad_unit) {
  FeatureMatrix out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double norm = raw.row(i).norm();
    const double radial = grad_unit.row(i).dot(unit.row(i));
    out.row(i) = (grad_unit.row(i) - radial * unit.row(i)) / norm;
  }
  return out;
}

struct CkaParts {
  KernelMatrix ks;  // centered student Gram
  KernelMatrix kt;  // centered teacher Gram
  double cross;     // <Ks~, Kt~>_F
  double ss;        // |Ks~|_F^2
  double tt;        // |Kt~|_F^2
};

CkaParts cka_parts(const FeatureMatrix& s, const FeatureMatrix& t) {
  require_paired(s, t);
  require(s.rows() >= 2, ErrorCode::kInvalidArgument, "CKA needs at least 2 patches");
  CkaParts p;
  p.ks = center_gram(gram(s));
  p.kt = center_gram(gram(t));
  p.cross = (p.ks.array() * p.kt.array()).sum();
  p.ss = p.ks.squaredNorm();
  p.tt = p.kt.squaredNorm();
  require(std::sqrt(p.ss) >= kDegenerateNorm, ErrorCode::kDegenerateInput, "student centered Gram is zero");
  require(std::sqrt(p.tt) >= kDegenerateNorm, ErrorCode::kDegenerateInput, "teacher centered Gram is zero");
  return p;
}

double gaussian(double sq_dist, double bw) { return std::exp(-sq_dist / (2.0 * bw * bw)); }

double resolve_bandwidth(const FeatureMatrix& s, const FeatureMatrix& t, std::optional<double> bandwidth) {
  if (!bandwidth) return median_heuristic_bandwidth(s, t);
  require(*bandwidth > 0.0 && std::isfinite(*bandwidth), ErrorCode::kInvalidArgument, "bandwidth must be positive");
  return *bandwidth;
}

// Mean of k(x_i, y_j) over all pairs.
double mean_kernel(const FeatureMatrix& x, const FeatureMatrix& y, double bw) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < y.rows(); ++j) sum += gaussian((x.row(i) - y.row(j)).squaredNorm(), bw);
  return sum / static_cast<double>(x.rows() * y.rows());
}

}  // namespace

KernelMatrix gram(const FeatureMatrix& features) {
  require_finite(features, "features");
  KernelMatrix k = features * features.transpose();
  // Enforce exact symmetry; the product can differ in the last ulp across triangles.
  return 0.5 * (k + k.transpose());
}

KernelMatrix center_gram(const KernelMatrix& kernel) {
  require(kernel.rows() > 0, ErrorCode::kInvalidArgument, "empty kernel");
  require(kernel.rows() == kernel.cols(), ErrorCode::kShapeMismatch, "kernel must be square");
  const Eigen::RowVectorXd col_mean = kernel.colwise().mean();
  const Eigen::VectorXd row_mean = kernel.rowwise().mean();
  const double grand = kernel.mean();
  KernelMatrix out = kernel;
  out.rowwise() -= col_mean;
  out.colwise() -= row_mean;
  out.array() += grand;
  return out;
}

AlignmentScore cka(const FeatureMatrix& s, const FeatureMatrix& t) {
  const CkaParts p = cka_parts(s, t);
  const double value = p.cross / (std::sqrt(p.ss) * std::sqrt(p.tt));
  return {std::clamp(value, 0.0, 1.0), AlignmentKind::kCka};
}

AlignmentScore hsic(const KernelMatrix& ka, const KernelMatrix& kb) {
  require(ka.rows() == kb.rows() && ka.cols() == kb.cols(), ErrorCode::kShapeMismatch, "kernels differ in size");
  require(ka.rows() >= 2, ErrorCode::kInvalidArgument, "HSIC needs at least 2 samples");
  const KernelMatrix ca = center_gram(ka);
  const KernelMatrix cb = center_gram(kb);
  const double n1 = static_cast<double>(ka.rows() - 1);
  // tr(A B) for symmetric A, B is the Frobenius inner product.
  return {(ca.array() * cb.array()).sum() / (n1 * n1), AlignmentKind::kHsic};
}

double median_heuristic_bandwidth(const FeatureMatrix& a, const FeatureMatrix& b) {
  require(a.cols() == b.cols(), ErrorCode::kShapeMismatch, "feature dims differ");
  FeatureMatrix pooled(a.rows() + b.rows(), a.cols());
  pooled << a, b;
  std::vector<double> dists;
  dists.reserve(static_cast<size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < pooled.rows(); ++i)
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) dists.push_back((pooled.row(i) - pooled.row(j)).norm());
  if (dists.empty()) return 1.0;
  std::sort(dists.begin(), dists.end());
  const size_t n = dists.size();
  const double median = (n % 2 == 1) ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
  return median > 0.0 ? median : 1.0;
}

AlignmentScore mmd_sq(const FeatureMatrix& s, const FeatureMatrix& t, std::optional<double> bandwidth) {
  require_finite(s, "S");
  require_finite(t, "T");
  require(s.cols() == t.cols(), ErrorCode::kShapeMismatch, "feature dims differ");
  const double bw = resolve_bandwidth(s, t, bandwidth);
  const double value = mean_kernel(s, s, bw) + mean_kernel(t, t, bw) - 2.0 * mean_kernel(s, t, bw);
  return {std::max(value, 0.0), AlignmentKind::kMmdSq};
}

double loss_paka(const FeatureMatrix& s, const FeatureMatrix& t) { return 1.0 - cka(s, t).value; }

FeatureMatrix grad_loss_paka(const FeatureMatrix& s, const FeatureMatrix& t) {
  const CkaParts p = cka_parts(s, t);
  const FeatureMatrix sc = center_columns(s);
  // d<Ks~,Kt~>/dS = 2 Kt~ S and d|Ks~|^2/dS = 4 Ks~ S (both kernels annihilate constant columns).
  const double inv = 2.0 / (std::sqrt(p.tt) * std::sqrt(p.ss));
  return -inv * (p.kt * sc - (p.cross / p.ss) * (p.ks * sc));
}

FeatureMatrix normalize_rows(const FeatureMatrix& features) {
  require_finite(features, "features");
  FeatureMatrix out(features.rows(), features.cols());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const double norm = features.row(i).norm();
    require(norm >= 1e-12, ErrorCode::kZeroRow, "row " + std::to_string(i) + " has zero norm");
    out.row(i) = features.row(i) / norm;
  }
  return out;
}

double loss_gram(const FeatureMatrix& s, const FeatureMatrix& t) {
  require_paired(s, t);
  const FeatureMatrix u = normalize_rows(s);
  const FeatureMatrix v = normalize_rows(t);
  return (gram(u) - gram(v)).squaredNorm();
}

FeatureMatrix grad_loss_gram(const FeatureMatrix& s, const FeatureMatrix& t) {
  require_paired(s, t);
  const FeatureMatrix u = normalize_rows(s);
  const FeatureMatrix v = normalize_rows(t);
  const KernelMatrix diff = gram(u) - gram(v);
  return normalize_rows_backward(s, u, 4.0 * diff * u);
}

double loss_hsic(const FeatureMatrix& s, const FeatureMatrix& t) {
  require_paired(s, t);
  return -hsic(gram(normalize_rows(s)), gram(normalize_rows(t))).value;
}

FeatureMatrix grad_loss_hsic(const FeatureMatrix& s, const FeatureMatrix& t) {
  require_paired(s, t);
  require(s.rows() >= 2, ErrorCode::kInvalidArgument, "HSIC needs at least 2 samples");
  const FeatureMatrix u = normalize_rows(s);
  const FeatureMatrix v = normalize_rows(t);
  const KernelMatrix kv = center_gram(gram(v));
  const double n1 = static_cast<double>(s.rows() - 1);
  return normalize_rows_backward(s, u, (-2.0 / (n1 * n1)) * (kv * u));
}

double loss_mmd(const FeatureMatrix& s, const FeatureMatrix& t, std::optional<double> bandwidth) {
  return mmd_sq(s, t, bandwidth).value;
}

FeatureMatrix grad_loss_mmd(const FeatureMatrix& s, const FeatureMatrix& t, std::optional<double> bandwidth) {
  require_finite(s, "S");
  require_finite(t, "T");
  require(s.cols() == t.cols(), ErrorCode::kShapeMismatch, "feature dims differ");
  const double bw = resolve_bandwidth(s, t, bandwidth);
  const double inv_bw2 = 1.0 / (bw * bw);
  const double ns = static_cast<double>(s.rows());
  const double nt = static_cast<double>(t.rows());
  FeatureMatrix g = FeatureMatrix::Zero(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.rows(); ++j) {
      const Eigen::RowVectorXd d = s.row(i) - s.row(j);
      g.row(i) -= (2.0 / (ns * ns)) * gaussian(d.squaredNorm(), bw) * inv_bw2 * d;
    }
    for (Eigen::Index j = 0; j < t.rows(); ++j) {
      const Eigen::RowVectorXd d = s.row(i) - t.row(j);
      g.row(i) += (2.0 / (ns * nt)) * gaussian(d.squaredNorm(), bw) * inv_bw2 * d;
    }
  }
  return g;
}

double coefficient_of_variation(std::span<const double> series) {
  require(series.size() >= 2, ErrorCode::kEmptyOrZeroMean, "need at least 2 values");
  double mean = 0.0;
  for (double v : series) mean += v;
  mean /= static_cast<double>(series.size());
  require(mean > 0.0, ErrorCode::kEmptyOrZeroMean, "mean must be positive");
  double var = 0.0;
  for (double v : series) var += (v - mean) * (v - mean);
  var /= static_cast<double>(series.size());
  return std::sqrt(var) / mean;
}

}  // namespace paka
