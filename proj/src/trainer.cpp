#include "paka/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "paka/error.hpp"
#include "paka/kernel_align.hpp"

namespace paka {
namespace {

bool is_skippable(const Error& e) {
  return e.code() == ErrorCode::kDegenerateInput || e.code() == ErrorCode::kZeroRow ||
         e.code() == ErrorCode::kEmptyIntersection;
}

struct PairRef {
  int image;
  int teacher_view;
  int student_view;
};

std::vector<PairRef> enumerate_pairs(const std::vector<ImageViews>& views, const TrainConfig& config) {
  std::vector<PairRef> pairs;
  for (int i = 0; i < static_cast<int>(views.size()); ++i) {
    const int ng = static_cast<int>(views[static_cast<size_t>(i)].global_boxes.size());
    const int nl = static_cast<int>(views[static_cast<size_t>(i)].local_boxes.size());
    if (config.pairing == Pairing::kSelf) {
      for (int g = 0; g < ng; ++g) pairs.push_back({i, g, g});
      continue;
    }
    for (int g = 0; g < ng; ++g)
      for (int l = 0; l < nl; ++l) pairs.push_back({i, g, ng + l});
    for (int g = 0; g < ng; ++g)
      for (int h = 0; h < ng; ++h)
        if (g != h) pairs.push_back({i, g, h});
  }
  return pairs;
}

bool use_head(const TrainConfig& config) { return config.feature_source == FeatureSource::kHead; }

struct Forwarded {
  std::vector<ImageViews> views;
  std::vector<std::vector<FeatureGrid>> teacher_out;  // [image][global]
  std::vector<std::vector<FeatureGrid>> student_out;  // [image][view]
  std::vector<std::vector<ForwardTape>> tapes;        // [image][view]
};

Forwarded forward_batch(const Model& student, const Model& teacher, std::span<const Image* const> images,
                        const TrainConfig& config, std::uint64_t step, bool keep_tapes) {
  Forwarded f;
  f.views = build_view_batch(images, config, step);
  const bool head = use_head(config);
  for (const ImageViews& v : f.views) {
    auto& tout = f.teacher_out.emplace_back();
    for (const Image& img : v.teacher_views) tout.push_back(model_forward(teacher, img, head));
    auto& sout = f.student_out.emplace_back();
    auto& tapes = f.tapes.emplace_back();
    for (const Image& img : v.student_views) {
      if (keep_tapes) {
        ForwardTape& tape = tapes.emplace_back();
        sout.push_back(model_forward(student, img, head, &tape));
      } else {
        sout.push_back(model_forward(student, img, head));
      }
    }
  }
  return f;
}

void adamw_update(TrainState& state, const Model& grads, const TrainConfig& config) {
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  auto params = state.student.tensors();
  auto ms = state.adam_m.tensors();
  auto vs = state.adam_v.tensors();
  const auto gs = grads.tensors();
  for (size_t i = 0; i < params.size(); ++i) {
    Eigen::MatrixXd& p = *params[i].second;
    Eigen::MatrixXd& m = *ms[i].second;
    Eigen::MatrixXd& v = *vs[i].second;
    const Eigen::MatrixXd& g = *gs[i].second;
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    const Eigen::ArrayXXd step = (m.array() / c1) / ((v.array() / c2).sqrt() + config.epsilon);
    p = (p.array() - config.learning_rate * step - config.learning_rate * config.weight_decay * p.array()).matrix();
  }
}

}  // namespace

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kPaka: return "paka";
    case LossKind::kGram: return "gram";
    case LossKind::kHsic: return "hsic";
    case LossKind::kMmd: return "mmd";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "paka") return LossKind::kPaka;
  if (name == "gram") return LossKind::kGram;
  if (name == "hsic") return LossKind::kHsic;
  if (name == "mmd") return LossKind::kMmd;
  fail(ErrorCode::kInvalidArgument, "unknown loss kind '" + name + "'");
}

const char* to_string(FeatureSource source) { return source == FeatureSource::kHead ? "head" : "backbone"; }

FeatureSource feature_source_from_string(const std::string& name) {
  if (name == "head") return FeatureSource::kHead;
  if (name == "backbone") return FeatureSource::kBackbone;
  fail(ErrorCode::kInvalidArgument, "unknown feature source '" + name + "'");
}

void validate(const TrainConfig& c) {
  auto check = [](bool ok, const char* what) { require(ok, ErrorCode::kInvalidArgument, what); };
  check(c.n_global == 2, "n_global is fixed at 2");
  check(c.n_local >= 0, "n_local must be >= 0");
  check(c.min_overlap >= 0.0 && c.min_overlap <= 1.0, "min_overlap must lie in [0,1]");
  check(c.teacher_aug_strength >= 0.0 && c.teacher_aug_strength <= 1.0, "teacher_aug_strength must lie in [0,1]");
  check(c.student_aug_strength >= 0.0 && c.student_aug_strength <= 1.0, "student_aug_strength must lie in [0,1]");
  check(c.target_h >= 1 && c.target_w >= 1, "target grid must be positive");
  check(c.learning_rate >= 0.0 && c.weight_decay >= 0.0, "learning rate and weight decay must be >= 0");
  check(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0, "betas must lie in [0,1)");
  check(c.epsilon > 0.0, "epsilon must be positive");
  check(c.steps >= 0, "steps must be >= 0");
  check(c.batch_size >= 1, "batch_size must be >= 1");
  check(c.global_res % c.shape.patch_size == 0 && c.local_res % c.shape.patch_size == 0,
        "view resolutions must be divisible by the patch size");
  check(c.global_res >= c.shape.patch_size && c.local_res >= c.shape.patch_size, "views must hold at least one patch");
  check(c.ema_m0 >= 0.0 && c.ema_m0 <= 1.0, "ema_m0 must lie in [0,1]");
  check(!c.mmd_bandwidth || *c.mmd_bandwidth > 0.0, "mmd bandwidth must be positive");
}

std::vector<ImageViews> build_view_batch(std::span<const Image* const> images, const TrainConfig& config,
                                         std::uint64_t step) {
  validate(config);
  std::vector<ImageViews> out;
  out.reserve(images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    const Image& img = *images[i];
    if (i > 0) {
      require(img.channels == images[0]->channels && img.height == images[0]->height && img.width == images[0]->width,
              ErrorCode::kShapeMismatch, "batch images must share dimensions");
    }
    const std::uint64_t key = step * 1000003ULL + i;
    Rng crop_rng(derive_seed(config.seed, "crops", key));
    Rng teacher_rng(derive_seed(config.seed, "teacher-aug", key));
    Rng student_rng(derive_seed(config.seed, "student-aug", key));

    ImageViews v;
    for (int g = 0; g < config.n_global; ++g) v.global_boxes.push_back(sample_global_crop(crop_rng, config.global_scale));
    for (int l = 0; l < config.n_local; ++l) {
      v.local_boxes.push_back(sample_local_crop_minoverlap(crop_rng, v.global_boxes, config.local_scale,
                                                           config.min_overlap, config.max_tries));
    }
    for (const CropBox& g : v.global_boxes) {
      const Image plain = crop_resize(img, g, config.global_res, config.global_res);
      v.teacher_views.push_back(augment(plain, config.teacher_aug_strength, teacher_rng, config.augment));
      v.student_views.push_back(augment(plain, config.student_aug_strength, student_rng, config.augment));
      v.student_boxes.push_back(g);
    }
    for (const CropBox& l : v.local_boxes) {
      const Image plain = crop_resize(img, l, config.local_res, config.local_res);
      v.student_views.push_back(augment(plain, config.student_aug_strength, student_rng, config.augment));
      v.student_boxes.push_back(l);
    }
    out.push_back(std::move(v));
  }
  return out;
}

double pair_objective(const FeatureMatrix& s, const FeatureMatrix& t, const TrainConfig& config, FeatureMatrix* grad_s) {
  switch (config.loss_kind) {
    case LossKind::kPaka:
      if (grad_s) *grad_s = grad_loss_paka(s, t);
      return loss_paka(s, t);
    case LossKind::kGram:
      if (grad_s) *grad_s = grad_loss_gram(s, t);
      return loss_gram(s, t);
    case LossKind::kHsic:
      if (grad_s) *grad_s = grad_loss_hsic(s, t);
      return loss_hsic(s, t);
    case LossKind::kMmd: {
      // Resolve the bandwidth once so loss and gradient share it.
      const double bw = config.mmd_bandwidth ? *config.mmd_bandwidth : median_heuristic_bandwidth(s, t);
      if (grad_s) *grad_s = grad_loss_mmd(s, t, bw);
      return loss_mmd(s, t, bw);
    }
  }
  return 0.0;
}

PairLoss compute_pair_loss(const FeatureGrid& teacher_grid, const CropBox& teacher_box, const FeatureGrid& student_grid,
                           const CropBox& student_box, const TrainConfig& config) {
  const auto inter = intersect(teacher_box, student_box);
  if (!inter) fail(ErrorCode::kEmptyIntersection, "teacher and student views do not overlap");
  const CropBox tb = box_in_view_coords(*inter, teacher_box);
  const CropBox sb = box_in_view_coords(*inter, student_box);
  const FeatureMatrix t = flatten_grid(roi_align(teacher_grid, tb, config.target_h, config.target_w));
  const FeatureMatrix s = flatten_grid(roi_align(student_grid, sb, config.target_h, config.target_w));
  FeatureMatrix grad;
  PairLoss out;
  out.loss = pair_objective(s, t, config, &grad);
  out.student_grad = roi_align_backward(reshape_to_grid(grad, config.target_h, config.target_w), sb,
                                        student_grid.height, student_grid.width);
  return out;
}

TrainState init_train_state(const TrainConfig& config) {
  validate(config);
  Rng rng(derive_seed(config.seed, "init"));
  TrainState s;
  s.student = init_model(config.shape, rng);
  s.teacher = s.student;
  s.adam_m = s.student.zeros_like();
  s.adam_v = s.student.zeros_like();
  return s;
}

BatchGradients batch_gradients(const TrainState& state, std::span<const Image* const> images, const TrainConfig& config,
                               std::uint64_t step) {
  Forwarded f = forward_batch(state.student, state.teacher, images, config, step, true);
  const std::vector<PairRef> pairs = enumerate_pairs(f.views, config);

  BatchGradients out;
  out.record.step = static_cast<std::int64_t>(step);
  std::vector<std::vector<std::optional<FeatureGrid>>> upstream(f.views.size());
  for (size_t i = 0; i < f.views.size(); ++i) upstream[i].resize(f.views[i].student_views.size());
  std::vector<std::pair<PairRef, FeatureGrid>> grads;
  for (const PairRef& p : pairs) {
    const ImageViews& v = f.views[static_cast<size_t>(p.image)];
    try {
      PairLoss pl = compute_pair_loss(f.teacher_out[static_cast<size_t>(p.image)][static_cast<size_t>(p.teacher_view)],
                                      v.global_boxes[static_cast<size_t>(p.teacher_view)],
                                      f.student_out[static_cast<size_t>(p.image)][static_cast<size_t>(p.student_view)],
                                      v.student_boxes[static_cast<size_t>(p.student_view)], config);
      out.record.pair_losses.push_back(pl.loss);
      grads.emplace_back(p, std::move(pl.student_grad));
    } catch (const Error& e) {
      if (!is_skippable(e)) throw;
      ++out.record.n_skipped;
    }
  }
  out.record.n_pairs = static_cast<int>(out.record.pair_losses.size());
  if (out.record.n_skipped > 0) {
    std::clog << "warning: step " << step << " skipped " << out.record.n_skipped << " degenerate pair(s)\n";
  }

  out.grads = state.student.zeros_like();
  if (out.record.n_pairs == 0) return out;
  double total = 0.0;
  for (double l : out.record.pair_losses) total += l;
  out.record.mean_loss = total / out.record.n_pairs;

  const double scale = 1.0 / out.record.n_pairs;
  for (auto& [p, g] : grads) {
    auto& slot = upstream[static_cast<size_t>(p.image)][static_cast<size_t>(p.student_view)];
    if (slot) slot->features += scale * g.features;
    else {
      g.features *= scale;
      slot = std::move(g);
    }
  }
  for (size_t i = 0; i < upstream.size(); ++i)
    for (size_t j = 0; j < upstream[i].size(); ++j)
      if (upstream[i][j]) backward(state.student, f.tapes[i][j], *upstream[i][j], out.grads);
  return out;
}

double batch_loss(const Model& student, const Model& teacher, std::span<const Image* const> images,
                  const TrainConfig& config, std::uint64_t step) {
  Forwarded f = forward_batch(student, teacher, images, config, step, false);
  double total = 0.0;
  int n = 0;
  for (const PairRef& p : enumerate_pairs(f.views, config)) {
    const ImageViews& v = f.views[static_cast<size_t>(p.image)];
    try {
      const auto inter = intersect(v.global_boxes[static_cast<size_t>(p.teacher_view)],
                                   v.student_boxes[static_cast<size_t>(p.student_view)]);
      if (!inter) fail(ErrorCode::kEmptyIntersection, "no overlap");
      const CropBox tb = box_in_view_coords(*inter, v.global_boxes[static_cast<size_t>(p.teacher_view)]);
      const CropBox sb = box_in_view_coords(*inter, v.student_boxes[static_cast<size_t>(p.student_view)]);
      const FeatureMatrix t = flatten_grid(roi_align(f.teacher_out[static_cast<size_t>(p.image)][static_cast<size_t>(p.teacher_view)], tb,
                                                     config.target_h, config.target_w));
      const FeatureMatrix s = flatten_grid(roi_align(f.student_out[static_cast<size_t>(p.image)][static_cast<size_t>(p.student_view)], sb,
                                                     config.target_h, config.target_w));
      total += pair_objective(s, t, config);
      ++n;
    } catch (const Error& e) {
      if (!is_skippable(e)) throw;
    }
  }
  return n > 0 ? total / n : 0.0;
}

StepRecord training_step(TrainState& state, std::span<const Image* const> images, const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  BatchGradients bg = batch_gradients(state, images, config, static_cast<std::uint64_t>(state.step));
  StepRecord& rec = bg.record;
  if (!std::isfinite(rec.mean_loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << " (last good step " << state.step - 1 << ", "
        << rec.n_pairs << " pairs)";
    fail(ErrorCode::kNonFiniteLoss, msg.str());
  }
  const std::int64_t total = std::max<std::int64_t>(config.steps, state.step + 1);
  rec.ema_momentum = ema_momentum({config.ema_m0, total}, state.step);
  if (rec.n_pairs > 0) adamw_update(state, bg.grads, config);
  ema_update(state.teacher, state.student, rec.ema_momentum);
  ++state.step;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

std::vector<std::size_t> batch_indices(const TrainConfig& config, std::size_t dataset_size, std::int64_t step) {
  require(dataset_size > 0, ErrorCode::kEmptyDataset, "dataset is empty");
  Rng rng(derive_seed(config.seed, "order", static_cast<std::uint64_t>(step)));
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> idx(static_cast<size_t>(config.batch_size));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

TrainResult run_training(const TrainConfig& config, const Dataset& dataset, const StepCallback& on_step) {
  require(!dataset.empty(), ErrorCode::kEmptyDataset, "dataset is empty");
  TrainState state = init_train_state(config);
  TrainResult result;
  result.log.reserve(static_cast<size_t>(config.steps));
  std::vector<const Image*> batch;
  for (std::int64_t s = 0; s < config.steps; ++s) {
    batch.clear();
    for (std::size_t i : batch_indices(config, dataset.samples.size(), s)) batch.push_back(&dataset.samples[i].image);
    result.log.push_back(training_step(state, batch, config));
    if (on_step) on_step(result.log.back());
  }
  result.checkpoint.student = std::move(state.student);
  result.checkpoint.teacher = std::move(state.teacher);
  result.checkpoint.step = state.step;
  return result;
}

void write_steps_csv(const std::filesystem::path& path, std::span<const StepRecord> log, bool include_wall_time) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIoError, "cannot write " + path.string());
  os << "step,mean_loss,n_pairs,ema_momentum,wall_ms\n";
  os << std::setprecision(17);
  for (const StepRecord& r : log) {
    os << r.step << ',' << r.mean_loss << ',' << r.n_pairs << ',' << r.ema_momentum << ','
       << (include_wall_time ? r.wall_ms : 0.0) << '\n';
  }
  if (!os) fail(ErrorCode::kIoError, "write failed for " + path.string());
}

std::vector<StepRecord> read_steps_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIoError, "cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "step,mean_loss,n_pairs,ema_momentum,wall_ms")
    fail(ErrorCode::kCorruptFile, path.string() + ": unexpected header");
  std::vector<StepRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    StepRecord r;
    char c1, c2, c3, c4;
    if (!(ls >> r.step >> c1 >> r.mean_loss >> c2 >> r.n_pairs >> c3 >> r.ema_momentum >> c4 >> r.wall_ms) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      fail(ErrorCode::kCorruptFile, path.string() + ":" + std::to_string(lineno) + ": malformed row");
    out.push_back(r);
  }
  return out;
}

StabilityReport stability_report(std::span<const StepRecord> log_a, std::span<const StepRecord> log_b,
                                 std::size_t window) {
  require(log_a.size() == log_b.size(), ErrorCode::kLengthMismatch, "logs differ in length");
  require(window >= 2 && log_a.size() >= window, ErrorCode::kLengthMismatch, "logs shorter than the window");
  auto summarize = [window](std::span<const StepRecord> log) {
    std::vector<double> xs;
    for (size_t i = log.size() - window; i < log.size(); ++i) xs.push_back(log[i].mean_loss);
    LogSummary s;
    s.cv = coefficient_of_variation(xs);
    s.min = *std::min_element(xs.begin(), xs.end());
    s.max = *std::max_element(xs.begin(), xs.end());
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(xs.size());
    return s;
  };
  StabilityReport r;
  r.window = window;
  r.a = summarize(log_a);
  r.b = summarize(log_b);
  if (r.a.cv < r.b.cv) r.verdict = "a_more_stable";
  else if (r.b.cv < r.a.cv) r.verdict = "b_more_stable";
  else r.verdict = "tie";
  return r;
}

}  // namespace paka
