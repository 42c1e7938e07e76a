#pragma once

#include <optional>
#include <span>

#include "paka/types.hpp"

namespace paka {

enum class AlignmentKind { kCka, kHsic, kMmdSq, kGramDistSq };

struct AlignmentScore {
  double value = 0.0;
  AlignmentKind kind = AlignmentKind::kCka;
};

// Centered Gram matrices with Frobenius norm below this are treated as carrying no signal.
inline constexpr double kDegenerateNorm = 1e-12;

KernelMatrix gram(const FeatureMatrix& features);

// H K H without materializing H.
KernelMatrix center_gram(const KernelMatrix& kernel);

AlignmentScore cka(const FeatureMatrix& s, const FeatureMatrix& t);

// Biased estimator tr(HKaH HKbH) / (N-1)^2.
AlignmentScore hsic(const KernelMatrix& ka, const KernelMatrix& kb);

// Median of the pairwise Euclidean distances over the pooled rows of a and b; 1.0 when that median is 0.
double median_heuristic_bandwidth(const FeatureMatrix& a, const FeatureMatrix& b);

// Biased V-statistic squared MMD with Gaussian kernel exp(-|x-y|^2 / (2 bw^2)).
// No bandwidth selects the median heuristic.
AlignmentScore mmd_sq(const FeatureMatrix& s, const FeatureMatrix& t, std::optional<double> bandwidth = std::nullopt);

double loss_paka(const FeatureMatrix& s, const FeatureMatrix& t);
FeatureMatrix grad_loss_paka(const FeatureMatrix& s, const FeatureMatrix& t);

// Squared Frobenius distance between Gram matrices of row-L2-normalized features.
double loss_gram(const FeatureMatrix& s, const FeatureMatrix& t);
FeatureMatrix grad_loss_gram(const FeatureMatrix& s, const FeatureMatrix& t);

// Negated HSIC between Gram matrices of row-L2-normalized features.
double loss_hsic(const FeatureMatrix& s, const FeatureMatrix& t);
FeatureMatrix grad_loss_hsic(const FeatureMatrix& s, const FeatureMatrix& t);

// mmd_sq as a loss. The bandwidth is a constant of the gradient (no derivative through the median).
double loss_mmd(const FeatureMatrix& s, const FeatureMatrix& t, std::optional<double> bandwidth = std::nullopt);
FeatureMatrix grad_loss_mmd(const FeatureMatrix& s, const FeatureMatrix& t, std::optional<double> bandwidth = std::nullopt);

// Population standard deviation divided by mean.
double coefficient_of_variation(std::span<const double> series);

// Row-wise L2 normalization; throws ZeroRow for rows with norm below 1e-12.
FeatureMatrix normalize_rows(const FeatureMatrix& features);

}  // namespace paka
