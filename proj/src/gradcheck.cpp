#include "paka/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "paka/data_synth.hpp"
#include "paka/kernel_align.hpp"

namespace paka {
namespace {

constexpr double kKernelStep = 1e-5;
constexpr double kModelStep = 1e-5;
constexpr int kCoordsPerTensor = 6;

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

Image random_image(Rng& rng, int channels, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(channels, h, w);
  for (double& p : img.pixels) p = u(rng);
  return img;
}

// Small model so the end-to-end checks stay cheap.
EncoderShape check_shape() {
  EncoderShape s;
  s.patch_size = 4;
  s.dim = 8;
  s.blocks = 2;
  s.head_hidden = 12;
  s.head_out = 6;
  return s;
}

GradcheckResult kernel_check(LossKind kind, const GradcheckOptions& opt) {
  GradcheckResult r{std::string("kernel/") + to_string(kind), opt.instances, 0.0, kKernelGradTolerance};
  for (int i = 0; i < opt.instances; ++i) {
    Rng rng(derive_seed(opt.seed, "gradcheck-kernel", static_cast<std::uint64_t>(i)));
    const Eigen::MatrixXd s = random_matrix(rng, 16, 8);
    const Eigen::MatrixXd t = random_matrix(rng, 16, 8);
    TrainConfig cfg;
    cfg.loss_kind = kind;
    // The bandwidth is a constant of the gradient, so the numeric side must hold it fixed too.
    if (kind == LossKind::kMmd) cfg.mmd_bandwidth = median_heuristic_bandwidth(s, t);
    FeatureMatrix analytic;
    pair_objective(s, t, cfg, &analytic);
    const auto f = [&](const Eigen::MatrixXd& x) { return pair_objective(x, t, cfg); };
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic, numeric_gradient(f, s, kKernelStep)));
  }
  return r;
}

// Tensors whose gradient is identically zero (the last head bias under PaKA: centering cancels
// a shared offset) are measured against this share of the model-wide gradient scale instead.
constexpr double kTensorScaleFloor = 1e-4;

// Sampled-coordinate check of d f / d params against an analytic gradient model.
double model_check(Model& params, const Model& analytic, const std::function<double()>& f, Rng& rng) {
  double worst = 0.0;
  auto ps = params.tensors();
  const auto as = analytic.tensors();
  double model_scale = 0.0;
  for (const auto& [name, a] : as) model_scale = std::max(model_scale, a->cwiseAbs().maxCoeff());
  for (size_t i = 0; i < ps.size(); ++i) {
    Eigen::MatrixXd& p = *ps[i].second;
    const Eigen::MatrixXd& a = *as[i].second;
    const double scale = std::max({a.cwiseAbs().maxCoeff(), kTensorScaleFloor * model_scale, 1e-12});
    std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
    for (int c = 0; c < kCoordsPerTensor; ++c) {
      const Eigen::Index k = pick(rng);
      const double orig = p.data()[k];
      p.data()[k] = orig + kModelStep;
      const double up = f();
      p.data()[k] = orig - kModelStep;
      const double down = f();
      p.data()[k] = orig;
      const double numeric = (up - down) / (2.0 * kModelStep);
      worst = std::max(worst, std::abs(a.data()[k] - numeric) / scale);
    }
  }
  return worst;
}

GradcheckResult encoder_check(bool with_head, const GradcheckOptions& opt) {
  GradcheckResult r{with_head ? "encoder/head" : "encoder/backbone", opt.instances, 0.0, kEndToEndGradTolerance};
  for (int i = 0; i < opt.instances; ++i) {
    Rng rng(derive_seed(opt.seed, with_head ? "gradcheck-head" : "gradcheck-backbone", static_cast<std::uint64_t>(i)));
    Model model = init_model(check_shape(), rng);
    const Image img = random_image(rng, 3, 16, 16);
    ForwardTape tape;
    const FeatureGrid out = model_forward(model, img, with_head, &tape);
    FeatureGrid upstream = out;
    upstream.features = random_matrix(rng, out.features.rows(), out.features.cols());
    const Model analytic = backward(model, tape, upstream);
    const auto f = [&] { return model_forward(model, img, with_head).features.cwiseProduct(upstream.features).sum(); };
    r.max_rel_error = std::max(r.max_rel_error, model_check(model, analytic, f, rng));
  }
  return r;
}

GradcheckResult end_to_end_check(LossKind kind, const GradcheckOptions& opt) {
  GradcheckResult r{std::string("end-to-end/") + to_string(kind), opt.instances, 0.0, kEndToEndGradTolerance};
  for (int i = 0; i < opt.instances; ++i) {
    const std::uint64_t seed = derive_seed(opt.seed, "gradcheck-e2e", static_cast<std::uint64_t>(i));
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.loss_kind = kind;
    cfg.shape = check_shape();
    cfg.global_res = 16;
    cfg.local_res = 8;
    cfg.n_local = 2;
    cfg.batch_size = 2;
    cfg.min_overlap = 0.5;
    cfg.local_scale = {0.15, 0.4};
    SceneSpec spec;
    spec.size = 32;
    spec.patch_size = 4;
    spec.seed = seed;
    const Sample a = generate_scene(spec, 0);
    const Sample b = generate_scene(spec, 1);
    const std::vector<const Image*> images{&a.image, &b.image};

    TrainState state = init_train_state(cfg);
    Rng rng(derive_seed(seed, "gradcheck-teacher"));
    const Model other = init_model(cfg.shape, rng);
    ema_update(state.teacher, other, 0.7);
    if (kind == LossKind::kMmd) cfg.mmd_bandwidth = 1.0;

    const BatchGradients bg = batch_gradients(state, images, cfg, 0);
    const auto f = [&] { return batch_loss(state.student, state.teacher, images, cfg, 0); };
    r.max_rel_error = std::max(r.max_rel_error, model_check(state.student, bg.grads, f, rng));
  }
  return r;
}

}  // namespace

double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(analytic.cwiseAbs().maxCoeff(), 1e-12);
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& f, const Eigen::MatrixXd& x,
                                 double h) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  Eigen::MatrixXd probe = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double orig = probe.data()[k];
    probe.data()[k] = orig + h;
    const double up = f(probe);
    probe.data()[k] = orig - h;
    const double down = f(probe);
    probe.data()[k] = orig;
    g.data()[k] = (up - down) / (2.0 * h);
  }
  return g;
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options) {
  std::vector<GradcheckResult> out;
  for (LossKind kind : options.losses) out.push_back(kernel_check(kind, options));
  out.push_back(encoder_check(false, options));
  out.push_back(encoder_check(true, options));
  if (options.end_to_end)
    for (LossKind kind : options.losses) out.push_back(end_to_end_check(kind, options));
  return out;
}

}  // namespace paka
