#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "paka/checkpoint.hpp"
#include "paka/data_synth.hpp"
#include "paka/encoder.hpp"
#include "paka/view_geometry.hpp"

namespace paka {

enum class LossKind { kPaka, kGram, kHsic, kMmd };
enum class FeatureSource { kHead, kBackbone };
// kCrossView: teacher globals x student locals plus the two crossed global pairs.
// kSelf: each teacher global paired with the student's copy of the same view (debugging aid).
enum class Pairing { kCrossView, kSelf };

const char* to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);
const char* to_string(FeatureSource source);
FeatureSource feature_source_from_string(const std::string& name);

struct TrainConfig {
  LossKind loss_kind = LossKind::kPaka;
  int n_global = 2;
  int n_local = 4;
  double min_overlap = 0.9;
  double teacher_aug_strength = 0.0;
  double student_aug_strength = 1.0;
  int target_h = 4;
  int target_w = 4;
  double learning_rate = 1e-3;
  double weight_decay = 0.04;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t steps = 500;
  int batch_size = 8;
  std::uint64_t seed = 0;
  FeatureSource feature_source = FeatureSource::kHead;

  int global_res = 64;
  int local_res = 32;
  ScaleRange global_scale{0.4, 1.0};
  ScaleRange local_scale{0.05, 0.4};
  int max_tries = kDefaultMaxTries;
  double ema_m0 = 0.99;
  std::optional<double> mmd_bandwidth;  // median heuristic when unset
  Pairing pairing = Pairing::kCrossView;
  EncoderShape shape;
  AugmentParams augment;
};

void validate(const TrainConfig& config);

// Views of one source image. Student views hold the globals first, then the locals.
struct ImageViews {
  std::vector<CropBox> global_boxes;
  std::vector<CropBox> local_boxes;
  std::vector<Image> teacher_views;  // one per global
  std::vector<Image> student_views;
  std::vector<CropBox> student_boxes;
};

// `step` keys the per-image random streams (crops, teacher and student augmentation are
// independent streams, so changing one strength never moves the crops).
std::vector<ImageViews> build_view_batch(std::span<const Image* const> images, const TrainConfig& config,
                                         std::uint64_t step);

struct PairLoss {
  double loss = 0.0;
  FeatureGrid student_grad;  // d(loss)/d(student grid), same shape as the student grid
};

PairLoss compute_pair_loss(const FeatureGrid& teacher_grid, const CropBox& teacher_box, const FeatureGrid& student_grid,
                           const CropBox& student_box, const TrainConfig& config);

// Loss and gradient w.r.t. S for one aligned pair.
double pair_objective(const FeatureMatrix& s, const FeatureMatrix& t, const TrainConfig& config,
                      FeatureMatrix* grad_s = nullptr);

struct StepRecord {
  std::int64_t step = 0;
  std::vector<double> pair_losses;
  double mean_loss = 0.0;
  int n_pairs = 0;
  int n_skipped = 0;
  double ema_momentum = 0.0;
  double wall_ms = 0.0;
};

struct TrainState {
  Model student;
  Model teacher;
  Model adam_m;
  Model adam_v;
  std::int64_t step = 0;
};

TrainState init_train_state(const TrainConfig& config);

struct BatchGradients {
  Model grads;
  StepRecord record;
};

// Forward + backward over one batch without touching parameters. Gradients are of the mean pair loss.
BatchGradients batch_gradients(const TrainState& state, std::span<const Image* const> images, const TrainConfig& config,
                               std::uint64_t step);

// Mean pair loss only (used by finite-difference checks).
double batch_loss(const Model& student, const Model& teacher, std::span<const Image* const> images,
                  const TrainConfig& config, std::uint64_t step);

// One optimizer step: gradients, AdamW update of the student, EMA update of the teacher.
StepRecord training_step(TrainState& state, std::span<const Image* const> images, const TrainConfig& config);

// Batch image indices for a step; depends only on (seed, step, dataset size).
std::vector<std::size_t> batch_indices(const TrainConfig& config, std::size_t dataset_size, std::int64_t step);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> log;
};

using StepCallback = std::function<void(const StepRecord&)>;

TrainResult run_training(const TrainConfig& config, const Dataset& dataset, const StepCallback& on_step = {});

// steps.csv: step,mean_loss,n_pairs,ema_momentum,wall_ms
void write_steps_csv(const std::filesystem::path& path, std::span<const StepRecord> log, bool include_wall_time);
std::vector<StepRecord> read_steps_csv(const std::filesystem::path& path);

struct LogSummary {
  double cv = 0.0;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

struct StabilityReport {
  std::size_t window = 0;
  LogSummary a;
  LogSummary b;
  std::string verdict;  // "a_more_stable", "b_more_stable" or "tie"
};

// Coefficient of variation of the mean loss over the trailing `window` steps of each log.
StabilityReport stability_report(std::span<const StepRecord> log_a, std::span<const StepRecord> log_b,
                                 std::size_t window);

}  // namespace paka
