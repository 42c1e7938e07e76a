#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>

#include "doctest.h"
#include "paka/error.hpp"
#include "paka/kernel_align.hpp"
#include "paka/trainer.hpp"
#include "test_util.hpp"

using namespace paka;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInvalidArgument;
}

// 16 px globals and 8 px locals over 4 px patches; D = 4.
TrainConfig micro_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.global_res = 16;
  c.local_res = 8;
  c.target_h = c.target_w = 2;
  c.n_local = 2;
  c.batch_size = 2;
  c.min_overlap = 0.5;
  c.local_scale = {0.15, 0.4};
  c.shape.patch_size = 4;
  c.shape.dim = 4;
  c.shape.blocks = 2;
  c.shape.head_hidden = 6;
  c.shape.head_out = 4;
  return c;
}

Dataset small_dataset(std::uint64_t seed, int count = 8) {
  SceneSpec spec;
  spec.seed = seed;
  spec.size = 32;
  spec.patch_size = 4;
  return make_dataset(spec, count);
}

std::vector<const Image*> first_images(const Dataset& ds, size_t n) {
  std::vector<const Image*> out;
  for (size_t i = 0; i < n; ++i) out.push_back(&ds.samples[i].image);
  return out;
}

bool models_equal(const Model& a, const Model& b) {
  const auto ta = a.tensors(), tb = b.tensors();
  for (size_t k = 0; k < ta.size(); ++k)
    if (!(*ta[k].second == *tb[k].second)) return false;
  return true;
}

}  // namespace

TEST_CASE("config validation and name round trips") {
  for (LossKind k : {LossKind::kPaka, LossKind::kGram, LossKind::kHsic, LossKind::kMmd})
    CHECK(loss_kind_from_string(to_string(k)) == k);
  CHECK(feature_source_from_string("backbone") == FeatureSource::kBackbone);
  CHECK(code_of([] { loss_kind_from_string("cka"); }) == ErrorCode::kInvalidArgument);
  TrainConfig c;
  c.min_overlap = 1.5;
  CHECK(code_of([&] { validate(c); }) == ErrorCode::kInvalidArgument);
  c = {};
  c.global_res = 60;
  CHECK(code_of([&] { validate(c); }) == ErrorCode::kInvalidArgument);
  c = {};
  c.n_global = 3;
  CHECK(code_of([&] { validate(c); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("build_view_batch: view counts, clean teacher, no locals") {
  const Dataset ds = small_dataset(1);
  const auto imgs = first_images(ds, 2);
  TrainConfig c = micro_config(1);
  c.teacher_aug_strength = 0.0;
  const auto views = build_view_batch(imgs, c, 0);
  REQUIRE(views.size() == 2);
  for (size_t i = 0; i < views.size(); ++i) {
    const ImageViews& v = views[i];
    CHECK(v.global_boxes.size() == 2);
    CHECK(v.local_boxes.size() == 2);
    CHECK(v.teacher_views.size() == 2);
    CHECK(v.student_views.size() == 4);
    CHECK(v.student_views[0].height == 16);
    CHECK(v.student_views[3].height == 8);
    for (size_t g = 0; g < 2; ++g)
      CHECK(v.teacher_views[g] == crop_resize(*imgs[i], v.global_boxes[g], c.global_res, c.global_res));
  }

  // Changing only the teacher strength never moves the crops or the student views.
  TrainConfig strong = c;
  strong.teacher_aug_strength = 1.0;
  const auto views2 = build_view_batch(imgs, strong, 0);
  for (size_t i = 0; i < views.size(); ++i) {
    CHECK(views2[i].student_views == views[i].student_views);
    CHECK_FALSE(views2[i].teacher_views == views[i].teacher_views);
  }

  c.n_local = 0;
  for (const ImageViews& v : build_view_batch(imgs, c, 3)) {
    CHECK(v.local_boxes.empty());
    CHECK(v.student_views.size() == 2);
  }

  std::vector<const Image*> mixed{&ds.samples[0].image, nullptr};
  Image other(3, 16, 16);
  mixed[1] = &other;
  CHECK(code_of([&] { build_view_batch(mixed, micro_config(1), 0); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("build_view_batch at m = 0.9 over 100 batches: every local passes the overlap re-check") {
  const Dataset ds = small_dataset(2);
  const auto imgs = first_images(ds, 4);
  TrainConfig c = micro_config(2);
  c.min_overlap = 0.9;
  c.n_local = 4;
  c.local_scale = {0.05, 0.4};
  int checked = 0, bad = 0;
  for (std::uint64_t step = 0; step < 100; ++step)
    for (const ImageViews& v : build_view_batch(imgs, c, step))
      for (const CropBox& l : v.local_boxes) {
        for (const CropBox& g : v.global_boxes) bad += overlap_ratio(l, g) < 0.9;
        ++checked;
      }
  CHECK(checked == 100 * 4 * 4);
  CHECK(bad == 0);
}

TEST_CASE("compute_pair_loss: identical views, composition oracle, constant teacher") {
  Rng rng(3);
  const TrainConfig c = micro_config(3);
  FeatureGrid g(4, 4, 5);
  g.features = test::random_matrix(rng, 16, 5);
  const CropBox box{0.1, 0.2, 0.9, 0.8};
  CHECK(compute_pair_loss(g, box, g, box, c).loss <= 1e-10);

  FeatureGrid s(2, 2, 5);
  s.features = test::random_matrix(rng, 4, 5);
  const CropBox tbox{0.0, 0.0, 0.7, 0.8}, sbox{0.4, 0.3, 0.8, 0.9};
  for (LossKind kind : {LossKind::kPaka, LossKind::kGram, LossKind::kHsic, LossKind::kMmd}) {
    TrainConfig k = c;
    k.loss_kind = kind;
    const PairLoss pl = compute_pair_loss(g, tbox, s, sbox, k);
    const CropBox inter = *intersect(tbox, sbox);
    const FeatureMatrix t = flatten_grid(roi_align(g, box_in_view_coords(inter, tbox), 2, 2));
    const FeatureMatrix sm = flatten_grid(roi_align(s, box_in_view_coords(inter, sbox), 2, 2));
    double direct = 0.0;
    switch (kind) {
      case LossKind::kPaka: direct = loss_paka(sm, t); break;
      case LossKind::kGram: direct = loss_gram(sm, t); break;
      case LossKind::kHsic: direct = loss_hsic(sm, t); break;
      case LossKind::kMmd: direct = loss_mmd(sm, t, median_heuristic_bandwidth(sm, t)); break;
    }
    CHECK(pl.loss == direct);
    CHECK(pl.student_grad.height == 2);
    CHECK(pl.student_grad.width == 2);
  }

  FeatureGrid flat(4, 4, 5);
  flat.features.setConstant(0.3);
  CHECK(code_of([&] { compute_pair_loss(flat, tbox, s, sbox, c); }) == ErrorCode::kDegenerateInput);
  CHECK(code_of([&] { compute_pair_loss(g, CropBox{0, 0, 0.3, 0.3}, s, CropBox{0.5, 0.5, 1, 1}, c); }) ==
        ErrorCode::kEmptyIntersection);
}

TEST_CASE("constant teacher: every pair skipped, no parameter update") {
  const Dataset ds = small_dataset(4);
  const auto imgs = first_images(ds, 2);
  TrainConfig c = micro_config(4);
  c.weight_decay = 0.0;
  TrainState st = init_train_state(c);
  for (auto& [name, t] : st.teacher.tensors())
    if (name.rfind("head.w3", 0) == 0) t->setZero();
  const TrainState before = st;
  const StepRecord r = training_step(st, imgs, c);
  CHECK(r.n_pairs == 0);
  CHECK(r.n_skipped == 2 * (2 * c.n_local + 2));
  CHECK(r.mean_loss == 0.0);
  CHECK(models_equal(st.student, before.student));
}

TEST_CASE("pair count is 2 n_local + 2 per image and PaKA losses stay in [0,1]") {
  const Dataset ds = small_dataset(5);
  for (int n_local : {0, 1, 3}) {
    TrainConfig c = micro_config(5);
    c.n_local = n_local;
    c.batch_size = 3;
    c.steps = 5;
    const TrainResult res = run_training(c, ds);
    for (const StepRecord& r : res.log) {
      CHECK(r.n_skipped == 0);
      CHECK(r.n_pairs == 3 * (2 * n_local + 2));
      CHECK(static_cast<int>(r.pair_losses.size()) == r.n_pairs);
      for (double l : r.pair_losses) CHECK((l >= 0.0 && l <= 1.0));
      const double sum = std::accumulate(r.pair_losses.begin(), r.pair_losses.end(), 0.0);
      CHECK(r.mean_loss == doctest::Approx(sum / r.n_pairs).epsilon(1e-15));
      // Dropping one pair moves the mean by exactly the averaging arithmetic.
      const double dropped = (sum - r.pair_losses.front()) / (r.n_pairs - 1);
      CHECK(std::abs((r.mean_loss * r.n_pairs - r.pair_losses.front()) / (r.n_pairs - 1) - dropped) <= 1e-14);
    }
  }
}

TEST_CASE("batch gradients match central differences of the batch loss (2 images, D = 4)") {
  const Dataset ds = small_dataset(6);
  const auto imgs = first_images(ds, 2);
  for (LossKind kind : {LossKind::kPaka, LossKind::kGram}) {
    TrainConfig c = micro_config(6);
    c.loss_kind = kind;
    TrainState st = init_train_state(c);
    // Separate the teacher from the student so the loss sits away from its optimum.
    Rng rng(7);
    const Model other = init_model(c.shape, rng);
    for (size_t k = 0; k < st.teacher.tensors().size(); ++k)
      *st.teacher.tensors()[k].second = 0.7 * *st.student.tensors()[k].second + 0.3 * *other.tensors()[k].second;

    const BatchGradients bg = batch_gradients(st, imgs, c, 0);
    CHECK(bg.record.mean_loss == doctest::Approx(batch_loss(st.student, st.teacher, imgs, c, 0)).epsilon(1e-14));
    double model_scale = 0.0;
    for (const auto& [name, t] : bg.grads.tensors()) model_scale = std::max(model_scale, t->cwiseAbs().maxCoeff());
    Model probe = st.student;
    auto params = probe.tensors();
    const auto grads = bg.grads.tensors();
    for (size_t k = 0; k < params.size(); ++k) {
      Eigen::MatrixXd& p = *params[k].second;
      Eigen::MatrixXd numeric(p.rows(), p.cols());
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double o = p.data()[i], h = 1e-5;
        p.data()[i] = o + h;
        const double up = batch_loss(probe, st.teacher, imgs, c, 0);
        p.data()[i] = o - h;
        const double dn = batch_loss(probe, st.teacher, imgs, c, 0);
        p.data()[i] = o;
        numeric.data()[i] = (up - dn) / (2 * h);
      }
      const Eigen::MatrixXd& a = *grads[k].second;
      const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-4 * model_scale);
      CAPTURE(params[k].first);
      CHECK((a - numeric).cwiseAbs().maxCoeff() / scale <= 1e-4);
    }
  }
}

TEST_CASE("optimizer edge cases: lr = 0 and wd = 0 leave the student bit-identical") {
  const Dataset ds = small_dataset(8);
  TrainConfig c = micro_config(8);
  c.learning_rate = 0.0;
  c.weight_decay = 0.0;
  c.steps = 3;
  const TrainState init = init_train_state(c);
  const TrainResult res = run_training(c, ds);
  CHECK(models_equal(res.checkpoint.student, init.student));
  CHECK(models_equal(res.checkpoint.teacher, init.teacher));
}

TEST_CASE("self pairing of clean views: zero loss and weight-decay-only updates") {
  const Dataset ds = small_dataset(9);
  const auto imgs = first_images(ds, 2);
  TrainConfig c = micro_config(9);
  c.pairing = Pairing::kSelf;
  c.teacher_aug_strength = 0.0;
  c.student_aug_strength = 0.0;
  c.weight_decay = 0.0;
  TrainState st = init_train_state(c);
  const Model init = st.student;
  for (int step = 0; step < 4; ++step) {
    const StepRecord r = training_step(st, imgs, c);
    CHECK(r.n_pairs == 4);
    CHECK(r.mean_loss <= 1e-12);
  }
  CHECK(models_equal(st.student, init));

  c.weight_decay = 0.04;
  TrainState wd = init_train_state(c);
  training_step(wd, imgs, c);
  const auto after = wd.student.tensors();
  const auto before = init.tensors();
  for (size_t k = 0; k < after.size(); ++k) {
    const Eigen::MatrixXd expected = before[k].second->array() - c.learning_rate * c.weight_decay * before[k].second->array();
    CHECK((*after[k].second - expected).cwiseAbs().maxCoeff() <= 1e-17);
  }
}

TEST_CASE("teacher stays in the convex hull of the old teacher and the new student") {
  const Dataset ds = small_dataset(10);
  TrainConfig c = micro_config(10);
  c.steps = 6;
  TrainState st = init_train_state(c);
  for (std::int64_t s = 0; s < c.steps; ++s) {
    std::vector<const Image*> batch;
    for (size_t i : batch_indices(c, ds.samples.size(), s)) batch.push_back(&ds.samples[i].image);
    const Model old_teacher = st.teacher;
    const StepRecord r = training_step(st, batch, c);
    if (s == 0) CHECK(r.ema_momentum == doctest::Approx(0.99).epsilon(1e-15));
    const auto t = st.teacher.tensors(), u = st.student.tensors();
    const auto o = old_teacher.tensors();
    for (size_t k = 0; k < t.size(); ++k) {
      const Eigen::MatrixXd lo = o[k].second->cwiseMin(*u[k].second), hi = o[k].second->cwiseMax(*u[k].second);
      CHECK((t[k].second->array() >= lo.array()).all());
      CHECK((t[k].second->array() <= hi.array()).all());
    }
  }
}

TEST_CASE("run_training: steps = 0, determinism, empty dataset, CSV round trip") {
  const Dataset ds = small_dataset(11);
  TrainConfig c = micro_config(11);
  c.steps = 0;
  const TrainResult zero = run_training(c, ds);
  CHECK(zero.log.empty());
  CHECK(zero.checkpoint.step == 0);
  CHECK(models_equal(zero.checkpoint.student, init_train_state(c).student));

  c.steps = 5;
  const TrainResult a = run_training(c, ds), b = run_training(c, ds);
  REQUIRE(a.log.size() == 5);
  for (size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].mean_loss == b.log[i].mean_loss);
    CHECK(a.log[i].pair_losses == b.log[i].pair_losses);
  }
  CHECK(models_equal(a.checkpoint.teacher, b.checkpoint.teacher));
  CHECK(batch_indices(c, ds.samples.size(), 3) == batch_indices(c, ds.samples.size(), 3));

  CHECK(code_of([&] { run_training(c, Dataset{}); }) == ErrorCode::kEmptyDataset);

  const auto dir = test::scratch_dir("trainer_csv");
  write_steps_csv(dir / "steps.csv", a.log, false);
  const auto back = read_steps_csv(dir / "steps.csv");
  REQUIRE(back.size() == a.log.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].step == a.log[i].step);
    CHECK(back[i].mean_loss == a.log[i].mean_loss);
    CHECK(back[i].n_pairs == a.log[i].n_pairs);
    CHECK(back[i].ema_momentum == a.log[i].ema_momentum);
    CHECK(back[i].wall_ms == 0.0);
  }
  {
    std::ofstream os(dir / "bad.csv");
    os << "step,loss\n1,2\n";
  }
  CHECK(code_of([&] { read_steps_csv(dir / "bad.csv"); }) == ErrorCode::kCorruptFile);
}

TEST_CASE("stability_report: examples and a single-pass oracle on a 200-step run") {
  std::vector<StepRecord> flat(10), varied(10);
  for (int i = 0; i < 10; ++i) {
    flat[static_cast<size_t>(i)].mean_loss = 0.5;
    varied[static_cast<size_t>(i)].mean_loss = 0.5 + 0.1 * (i % 3);
  }
  const StabilityReport same = stability_report(varied, varied, 10);
  CHECK(same.a.cv == same.b.cv);
  CHECK(same.verdict == "tie");
  const StabilityReport fv = stability_report(flat, varied, 10);
  CHECK(fv.a.cv == 0.0);
  CHECK(fv.b.cv > 0.0);
  CHECK(fv.verdict == "a_more_stable");
  CHECK(code_of([&] { stability_report(flat, std::span(varied).first(9), 9); }) == ErrorCode::kLengthMismatch);
  CHECK(code_of([&] { stability_report(flat, varied, 11); }) == ErrorCode::kLengthMismatch);

  const Dataset ds = small_dataset(12);
  TrainConfig c = micro_config(12);
  c.steps = 200;
  const TrainResult run = run_training(c, ds);
  // Single pass over sums of x and x^2.
  double s1 = 0.0, s2 = 0.0;
  for (const StepRecord& r : run.log) {
    s1 += r.mean_loss;
    s2 += r.mean_loss * r.mean_loss;
  }
  const double n = static_cast<double>(run.log.size()), mean = s1 / n;
  const double oracle = std::sqrt(std::max(0.0, s2 / n - mean * mean)) / mean;
  const StabilityReport rep = stability_report(run.log, run.log, run.log.size());
  CHECK(rep.a.cv == doctest::Approx(oracle).epsilon(1e-8));
  CHECK(rep.a.mean == doctest::Approx(mean).epsilon(1e-12));
  const StabilityReport tail = stability_report(run.log, run.log, 50);
  std::vector<double> last;
  for (size_t i = 150; i < 200; ++i) last.push_back(run.log[i].mean_loss);
  CHECK(tail.a.cv == coefficient_of_variation(last));
}

TEST_CASE("500-step PaKA run on the default config lowers the loss") {
  SceneSpec spec;
  spec.seed = 13;
  const Dataset ds = make_dataset(spec, 64);
  TrainConfig c;
  c.seed = 13;
  c.steps = 500;
  const TrainResult run = run_training(c, ds);
  double first = 0.0, last = 0.0;
  for (size_t i = 0; i < 50; ++i) {
    first += run.log[i].mean_loss / 50.0;
    last += run.log[run.log.size() - 1 - i].mean_loss / 50.0;
  }
  CAPTURE(first);
  CAPTURE(last);
  CHECK(last < first);
}
