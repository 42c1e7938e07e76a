#include "paka/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "paka/error.hpp"

namespace paka {
namespace {

Eigen::MatrixXd affine(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Eigen::MatrixXd random_matrix(Rng& rng, int rows, int cols, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  // Fill row-major so the draw order is independent of Eigen's storage order.
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

int wrap_index(int i, int n, NeighborMode mode) {
  if (mode == NeighborMode::kClamp) return std::clamp(i, 0, n - 1);
  return ((i % n) + n) % n;
}

template <typename Fn>
void for_each_param_pair(Model& a, const Model& b, Fn&& fn) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (size_t i = 0; i < ta.size(); ++i) fn(*ta[i].second, *tb[i].second);
}

}  // namespace

std::vector<std::pair<std::string, const Eigen::MatrixXd*>> Model::tensors() const {
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> out;
  out.emplace_back("encoder.embed.weight", &encoder.embed_w);
  out.emplace_back("encoder.embed.bias", &encoder.embed_b);
  for (size_t i = 0; i < encoder.blocks.size(); ++i) {
    const std::string p = "encoder.block" + std::to_string(i) + ".";
    out.emplace_back(p + "w1", &encoder.blocks[i].w1);
    out.emplace_back(p + "b1", &encoder.blocks[i].b1);
    out.emplace_back(p + "w2", &encoder.blocks[i].w2);
    out.emplace_back(p + "b2", &encoder.blocks[i].b2);
  }
  out.emplace_back("head.w1", &head.w1);
  out.emplace_back("head.b1", &head.b1);
  out.emplace_back("head.w2", &head.w2);
  out.emplace_back("head.b2", &head.b2);
  out.emplace_back("head.w3", &head.w3);
  out.emplace_back("head.b3", &head.b3);
  return out;
}

std::vector<std::pair<std::string, Eigen::MatrixXd*>> Model::tensors() {
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> out;
  for (auto& [name, ptr] : std::as_const(*this).tensors()) out.emplace_back(name, const_cast<Eigen::MatrixXd*>(ptr));
  return out;
}

Model Model::zeros_like() const {
  Model z = *this;
  for (auto& [name, t] : z.tensors()) t->setZero();
  return z;
}

bool Model::same_shape(const Model& other) const {
  if (encoder.patch_size != other.encoder.patch_size || encoder.channels != other.encoder.channels) return false;
  if (encoder.blocks.size() != other.encoder.blocks.size()) return false;
  const auto a = tensors();
  const auto b = other.tensors();
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].second->rows() != b[i].second->rows() || a[i].second->cols() != b[i].second->cols()) return false;
  }
  return true;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors()) n += static_cast<std::size_t>(t->size());
  return n;
}

Model init_model(const EncoderShape& shape, Rng& rng) {
  require(shape.channels >= 1 && shape.patch_size >= 1 && shape.dim >= 1 && shape.blocks >= 0 &&
              shape.head_hidden >= 1 && shape.head_out >= 1,
          ErrorCode::kInvalidArgument, "invalid encoder shape");
  Model m;
  const int in = shape.patch_size * shape.patch_size * shape.channels;
  const int d = shape.dim;
  m.encoder.channels = shape.channels;
  m.encoder.patch_size = shape.patch_size;
  m.encoder.embed_w = random_matrix(rng, in, d, 1.0 / std::sqrt(static_cast<double>(in)));
  m.encoder.embed_b = Eigen::MatrixXd::Zero(1, d);
  for (int b = 0; b < shape.blocks; ++b) {
    ResidualBlock blk;
    blk.w1 = random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    blk.b1 = Eigen::MatrixXd::Zero(1, d);
    blk.w2 = random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    blk.b2 = Eigen::MatrixXd::Zero(1, d);
    m.encoder.blocks.push_back(std::move(blk));
  }
  const int h = shape.head_hidden;
  m.head.w1 = random_matrix(rng, d, h, 1.0 / std::sqrt(static_cast<double>(d)));
  m.head.b1 = Eigen::MatrixXd::Zero(1, h);
  m.head.w2 = random_matrix(rng, h, h, 1.0 / std::sqrt(static_cast<double>(h)));
  m.head.b2 = Eigen::MatrixXd::Zero(1, h);
  m.head.w3 = random_matrix(rng, h, shape.head_out, 1.0 / std::sqrt(static_cast<double>(h)));
  m.head.b3 = Eigen::MatrixXd::Zero(1, shape.head_out);
  return m;
}

Eigen::MatrixXd extract_patches(const Image& image, int patch_size) {
  const int p = patch_size;
  require(image.height % p == 0 && image.width % p == 0, ErrorCode::kShapeMismatch,
          "image dims must be divisible by the patch size");
  const int gh = image.height / p;
  const int gw = image.width / p;
  Eigen::MatrixXd out(gh * gw, p * p * image.channels);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const int row = gy * gw + gx;
      int col = 0;
      for (int c = 0; c < image.channels; ++c)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px) out(row, col++) = image.at(c, gy * p + py, gx * p + px);
    }
  return out;
}

Eigen::MatrixXd neighbor_mean(const Eigen::MatrixXd& x, int h, int w, NeighborMode mode) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      auto dst = out.row(y * w + xx);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) dst += x.row(wrap_index(y + dy, h, mode) * w + wrap_index(xx + dx, w, mode));
      dst /= 9.0;
    }
  return out;
}

Eigen::MatrixXd neighbor_mean_transpose(const Eigen::MatrixXd& g, int h, int w, NeighborMode mode) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(g.rows(), g.cols());
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      const Eigen::RowVectorXd share = g.row(y * w + xx) / 9.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) out.row(wrap_index(y + dy, h, mode) * w + wrap_index(xx + dx, w, mode)) += share;
    }
  return out;
}

FeatureGrid encoder_forward(const EncoderParams& params, const Image& image, EncoderTape* tape, NeighborMode mode) {
  require(image.channels == params.channels, ErrorCode::kShapeMismatch, "image channel count differs from encoder");
  const int p = params.patch_size;
  Eigen::MatrixXd patches = extract_patches(image, p);
  require(patches.cols() == params.embed_w.rows(), ErrorCode::kShapeMismatch, "patch length differs from embedding");
  const int gh = image.height / p;
  const int gw = image.width / p;

  Eigen::MatrixXd x = affine(patches, params.embed_w, params.embed_b);
  if (tape) {
    tape->grid_h = gh;
    tape->grid_w = gw;
    tape->mode = mode;
    tape->blocks.clear();
  }
  for (const ResidualBlock& blk : params.blocks) {
    Eigen::MatrixXd mixed = x + neighbor_mean(x, gh, gw, mode);
    Eigen::MatrixXd hidden = affine(mixed, blk.w1, blk.b1).array().tanh().matrix();
    Eigen::MatrixXd next = x + affine(hidden, blk.w2, blk.b2);
    if (tape) tape->blocks.push_back({std::move(x), std::move(mixed), std::move(hidden)});
    x = std::move(next);
  }
  if (tape) tape->patches = std::move(patches);

  FeatureGrid out;
  out.height = gh;
  out.width = gw;
  out.features = std::move(x);
  return out;
}

FeatureGrid projector_forward(const ProjectionHeadParams& params, const FeatureGrid& grid, HeadTape* tape) {
  require(grid.dim() == params.w1.rows(), ErrorCode::kShapeMismatch, "grid channels differ from head input");
  Eigen::MatrixXd h1 = affine(grid.features, params.w1, params.b1).array().tanh().matrix();
  Eigen::MatrixXd h2 = affine(h1, params.w2, params.b2).array().tanh().matrix();
  FeatureGrid out;
  out.height = grid.height;
  out.width = grid.width;
  out.features = affine(h2, params.w3, params.b3);
  if (tape) {
    tape->input = grid.features;
    tape->h1 = std::move(h1);
    tape->h2 = std::move(h2);
  }
  return out;
}

FeatureGrid model_forward(const Model& model, const Image& image, bool with_head, ForwardTape* tape,
                          NeighborMode mode) {
  FeatureGrid grid = encoder_forward(model.encoder, image, tape ? &tape->encoder : nullptr, mode);
  if (!with_head) {
    if (tape) tape->head.reset();
    return grid;
  }
  if (!tape) return projector_forward(model.head, grid, nullptr);
  tape->head.emplace();
  return projector_forward(model.head, grid, &*tape->head);
}

void backward(const Model& model, const ForwardTape& tape, const FeatureGrid& upstream, Model& grads) {
  const EncoderTape& enc = tape.encoder;
  const int n = enc.grid_h * enc.grid_w;
  require(upstream.height == enc.grid_h && upstream.width == enc.grid_w, ErrorCode::kStaleCache,
          "upstream grid dims differ from the taped forward");
  require(enc.blocks.size() == model.encoder.blocks.size() && enc.patches.rows() == n, ErrorCode::kStaleCache,
          "tape does not match the model");
  require(grads.same_shape(model), ErrorCode::kShapeMismatch, "gradient store shape differs from model");

  Eigen::MatrixXd g = upstream.features;
  if (tape.head) {
    const HeadTape& ht = *tape.head;
    require(g.cols() == model.head.w3.cols() && ht.h2.rows() == n, ErrorCode::kStaleCache, "head tape mismatch");
    grads.head.w3.noalias() += ht.h2.transpose() * g;
    grads.head.b3 += g.colwise().sum();
    Eigen::MatrixXd d2 = ((g * model.head.w3.transpose()).array() * (1.0 - ht.h2.array().square())).matrix();
    grads.head.w2.noalias() += ht.h1.transpose() * d2;
    grads.head.b2 += d2.colwise().sum();
    Eigen::MatrixXd d1 = ((d2 * model.head.w2.transpose()).array() * (1.0 - ht.h1.array().square())).matrix();
    grads.head.w1.noalias() += ht.input.transpose() * d1;
    grads.head.b1 += d1.colwise().sum();
    g = d1 * model.head.w1.transpose();
  } else {
    require(g.cols() == model.encoder.dim(), ErrorCode::kStaleCache, "upstream channels differ from encoder dim");
  }

  for (size_t bi = model.encoder.blocks.size(); bi-- > 0;) {
    const ResidualBlock& blk = model.encoder.blocks[bi];
    const BlockTape& bt = enc.blocks[bi];
    ResidualBlock& gb = grads.encoder.blocks[bi];
    gb.w2.noalias() += bt.hidden.transpose() * g;
    gb.b2 += g.colwise().sum();
    Eigen::MatrixXd da = ((g * blk.w2.transpose()).array() * (1.0 - bt.hidden.array().square())).matrix();
    gb.w1.noalias() += bt.mixed.transpose() * da;
    gb.b1 += da.colwise().sum();
    Eigen::MatrixXd dmixed = da * blk.w1.transpose();
    g += dmixed + neighbor_mean_transpose(dmixed, enc.grid_h, enc.grid_w, enc.mode);
  }
  grads.encoder.embed_w.noalias() += enc.patches.transpose() * g;
  grads.encoder.embed_b += g.colwise().sum();
}

Model backward(const Model& model, const ForwardTape& tape, const FeatureGrid& upstream) {
  Model grads = model.zeros_like();
  backward(model, tape, upstream, grads);
  return grads;
}

double ema_momentum(const EmaSchedule& schedule, std::int64_t step) {
  require(schedule.total_steps >= 1, ErrorCode::kInvalidArgument, "total_steps must be >= 1");
  require(schedule.m0 >= 0.0 && schedule.m0 <= 1.0, ErrorCode::kInvalidArgument, "m0 must lie in [0,1]");
  require(step >= 0 && step <= schedule.total_steps, ErrorCode::kStepOutOfRange,
          "step " + std::to_string(step) + " outside [0, " + std::to_string(schedule.total_steps) + "]");
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return 1.0 - (1.0 - schedule.m0) * (std::cos(phase) + 1.0) / 2.0;
}

void ema_update(Model& teacher, const Model& student, double momentum) {
  require(teacher.same_shape(student), ErrorCode::kShapeMismatch, "teacher and student shapes differ");
  require(momentum >= 0.0 && momentum <= 1.0, ErrorCode::kInvalidArgument, "momentum must lie in [0,1]");
  if (momentum == 1.0) return;
  for_each_param_pair(teacher, student, [momentum](Eigen::MatrixXd& t, const Eigen::MatrixXd& s) {
    if (momentum == 0.0) t = s;
    else t += (1.0 - momentum) * (s - t);  // exact no-op wherever teacher already equals student
  });
}

}  // namespace paka
