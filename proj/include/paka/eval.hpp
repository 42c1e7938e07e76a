#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "paka/types.hpp"

namespace paka {

struct ClusterAssignment {
  std::vector<int> labels;  // per-row cluster id in [0, K)
  Eigen::MatrixXd centroids;  // K x D
  std::vector<double> inertia_history;  // inertia after each assignment step
  int iterations = 0;

  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

// Lloyd's algorithm with k-means++ seeding. Stops when assignments no longer change or after
// max_iters; an empty cluster is re-seeded at the point farthest from its centroid.
ClusterAssignment kmeans_fit(const FeatureMatrix& features, int k, Rng& rng, int max_iters = 100);

// Minimum-cost perfect matching on a square matrix; result[row] = assigned column.
std::vector<int> hungarian(const Eigen::MatrixXd& cost);
double assignment_cost(const Eigen::MatrixXd& cost, std::span<const int> assignment);

// Many-to-one cluster -> class map: clusters visited by descending size, each mapped to the
// class with the highest precision inside it (ties to the lower class id).
std::vector<int> greedy_precision_match(std::span<const int> clusters, int k, std::span<const int> labels, int classes);

// Prediction x ground-truth pixel counts.
struct ConfusionTally {
  int classes = 0;
  std::vector<std::int64_t> counts;  // classes x classes, row = prediction

  explicit ConfusionTally(int c) : classes(c), counts(static_cast<size_t>(c) * c, 0) {}
  void add(int predicted, int truth, std::int64_t n = 1);
  std::int64_t at(int predicted, int truth) const { return counts[static_cast<size_t>(predicted) * classes + truth]; }
  std::int64_t total() const;
};

struct IouReport {
  std::vector<double> per_class;  // NaN for classes absent from the ground truth
  double miou = 0.0;  // mean over classes present in the ground truth
  double accuracy = 0.0;
};

IouReport iou_from_tally(const ConfusionTally& tally);
IouReport iou_from_predictions(std::span<const int> predicted, std::span<const int> truth, int classes);

// Majority class inside each patch cell; ties go to the smaller id.
std::vector<int> patch_labels_from_mask(const LabelMask& mask, int grid_h, int grid_w);

struct OverclusterResult {
  double miou = 0.0;  // averaged over seeds
  std::vector<double> per_seed_miou;
  std::vector<double> per_class;  // averaged over seeds
  double accuracy = 0.0;
};

// Scores one clustering of pooled patches against patch labels: greedy precision matching when
// K != C, Hungarian matching on the agreement matrix when K == C.
IouReport score_clustering(std::span<const int> clusters, int k, std::span<const int> labels, int classes);

// K-means over all pooled patch rows, repeated for `seeds` runs derived from `seed`.
OverclusterResult overcluster_miou(const FeatureMatrix& pooled, std::span<const int> labels, int k, int classes,
                                   std::uint64_t seed, int seeds = 5, int max_iters = 100);

// Per-image variant: grids are flattened and masks reduced to the grid resolution.
OverclusterResult overcluster_miou(std::span<const FeatureGrid> grids, std::span<const LabelMask> masks, int k,
                                   int classes, std::uint64_t seed, int seeds = 5, int max_iters = 100);

struct PatchProvenance {
  int image = 0;
  int y = 0;
  int x = 0;
  bool operator==(const PatchProvenance&) const = default;
};

struct MemoryBank {
  FeatureMatrix keys;  // M x D
  std::vector<int> labels;
  std::vector<PatchProvenance> provenance;

  std::size_t size() const { return labels.size(); }
};

MemoryBank build_memory_bank(std::span<const FeatureGrid> grids, std::span<const LabelMask> masks,
                             std::span<const int> image_ids);

// Exact cosine top-k with a similarity-weighted label vote (ties to the smaller class id).
// When `query_provenance` is given, bank rows with identical provenance are skipped.
std::vector<int> nn_retrieval_predict(const MemoryBank& bank, const FeatureMatrix& queries, int k,
                                      std::span<const PatchProvenance> query_provenance = {});

struct LinearProbeConfig {
  int epochs = 20;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct LinearProbeResult {
  IouReport eval;
  Eigen::MatrixXd weight;  // D x C
  Eigen::RowVectorXd bias;
};

// Affine softmax classifier over frozen features trained with SGD + momentum on cross-entropy.
LinearProbeResult linear_probe(const FeatureMatrix& train_x, std::span<const int> train_y, const FeatureMatrix& eval_x,
                               std::span<const int> eval_y, int classes, const LinearProbeConfig& config = {});

}  // namespace paka
