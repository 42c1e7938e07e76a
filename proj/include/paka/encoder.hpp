#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "paka/types.hpp"

namespace paka {

struct EncoderShape {
  int channels = 3;
  int patch_size = 8;
  int dim = 32;
  int blocks = 2;
  int head_hidden = 64;
  int head_out = 32;
};

struct ResidualBlock {
  Eigen::MatrixXd w1;  // D x D
  Eigen::MatrixXd b1;  // 1 x D
  Eigen::MatrixXd w2;  // D x D
  Eigen::MatrixXd b2;  // 1 x D
};

struct EncoderParams {
  int channels = 3;
  int patch_size = 8;
  Eigen::MatrixXd embed_w;  // (P*P*C) x D
  Eigen::MatrixXd embed_b;  // 1 x D
  std::vector<ResidualBlock> blocks;

  int dim() const { return static_cast<int>(embed_w.cols()); }
};

// Three affine layers D -> Dh -> Dh -> Dq with tanh after the first two.
struct ProjectionHeadParams {
  Eigen::MatrixXd w1, b1;
  Eigen::MatrixXd w2, b2;
  Eigen::MatrixXd w3, b3;

  int out_dim() const { return static_cast<int>(w3.cols()); }
};

struct Model {
  EncoderParams encoder;
  ProjectionHeadParams head;

  // Every parameter tensor under a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> tensors();
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> tensors() const;

  // Same shapes, all zeros.
  Model zeros_like() const;
  bool same_shape(const Model& other) const;
  std::size_t parameter_count() const;
};

Model init_model(const EncoderShape& shape, Rng& rng);

// Border handling of the 3x3 neighbour average inside residual blocks.
enum class NeighborMode { kClamp, kWrap };

struct BlockTape {
  Eigen::MatrixXd input;   // X
  Eigen::MatrixXd mixed;   // X + neighbor_mean(X)
  Eigen::MatrixXd hidden;  // tanh(mixed W1 + b1)
};

struct EncoderTape {
  int grid_h = 0;
  int grid_w = 0;
  NeighborMode mode = NeighborMode::kClamp;
  Eigen::MatrixXd patches;  // N x (P*P*C)
  std::vector<BlockTape> blocks;
};

struct HeadTape {
  Eigen::MatrixXd input;
  Eigen::MatrixXd h1;
  Eigen::MatrixXd h2;
};

// Intermediates of one forward pass, consumed by backward().
struct ForwardTape {
  EncoderTape encoder;
  std::optional<HeadTape> head;
};

// Patch vectors laid out as (channel, row, column) within each patch; one row per patch.
Eigen::MatrixXd extract_patches(const Image& image, int patch_size);

Eigen::MatrixXd neighbor_mean(const Eigen::MatrixXd& x, int h, int w, NeighborMode mode);
Eigen::MatrixXd neighbor_mean_transpose(const Eigen::MatrixXd& g, int h, int w, NeighborMode mode);

FeatureGrid encoder_forward(const EncoderParams& params, const Image& image, EncoderTape* tape = nullptr,
                            NeighborMode mode = NeighborMode::kClamp);

FeatureGrid projector_forward(const ProjectionHeadParams& params, const FeatureGrid& grid, HeadTape* tape = nullptr);

// Encoder followed by the head when `with_head` is set.
FeatureGrid model_forward(const Model& model, const Image& image, bool with_head, ForwardTape* tape = nullptr,
                          NeighborMode mode = NeighborMode::kClamp);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output) of the taped forward.
// The output is the head output when the tape holds a head section, else the encoder output.
void backward(const Model& model, const ForwardTape& tape, const FeatureGrid& upstream, Model& grads);
Model backward(const Model& model, const ForwardTape& tape, const FeatureGrid& upstream);

struct EmaSchedule {
  double m0 = 0.99;
  std::int64_t total_steps = 1;
};

// Cosine ramp from m0 at step 0 to 1 at total_steps.
double ema_momentum(const EmaSchedule& schedule, std::int64_t step);

// teacher <- m * teacher + (1 - m) * student, over encoder and head.
void ema_update(Model& teacher, const Model& student, double momentum);

}  // namespace paka
