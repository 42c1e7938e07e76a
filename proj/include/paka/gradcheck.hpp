#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "paka/encoder.hpp"
#include "paka/trainer.hpp"

namespace paka {

inline constexpr double kKernelGradTolerance = 1e-5;
inline constexpr double kEndToEndGradTolerance = 1e-4;

struct GradcheckResult {
  std::string name;
  int instances = 0;
  double max_rel_error = 0.0;
  double threshold = 0.0;

  bool passed() const { return max_rel_error <= threshold; }
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int instances = 20;
  std::vector<LossKind> losses{LossKind::kPaka, LossKind::kGram, LossKind::kHsic, LossKind::kMmd};
  bool end_to_end = true;
};

// Error of an analytic gradient against central differences, scaled by the analytic
// gradient's largest magnitude: max_i |a_i - n_i| / max(max_i |a_i|, 1e-12).
double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric);

// Central-difference gradient of f at x (all coordinates).
Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& f, const Eigen::MatrixXd& x,
                                 double h);

// Kernel-loss gradients (kernel/<loss>), encoder backward with and without the head
// (encoder/backbone, encoder/head) and the full training loss through the encoder (end-to-end/<loss>).
// Model checks sample coordinates per tensor and scale each tensor's error by its own largest
// analytic entry, floored at 1e-4 of the largest entry across the whole model.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options);

}  // namespace paka
