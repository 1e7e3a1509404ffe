#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "card/car_losses.hpp"
#include "card/ejpu.hpp"
#include "card/label_field.hpp"
#include "card/layers.hpp"
#include "card/saa.hpp"
#include "card/tensor.hpp"

namespace card {

enum class Upsampler { kEjpu, kDilated };

std::string to_string(Upsampler u);
Upsampler parse_upsampler(const std::string& s);

struct ModelConfig {
  std::size_t stem_channels = 8;
  // Backbone stages at strides 4, 8, 16, 32.
  std::vector<std::size_t> stage_channels{16, 32, 64, 64};
  std::size_t decoder_width = 8;
  std::size_t c_out = 64;
  std::size_t heads = 4;
  std::size_t num_classes = 4;
  Upsampler upsampler = Upsampler::kEjpu;

  void validate() const;
  // Stable text form of every architecture-defining field.
  std::string canonical() const;
  std::uint64_t digest() const;
};

struct ModelOutput {
  Tensor features;  // mixer output at OS8, the tensor CAR regularizes
  Tensor logits;    // [N x H8 x W8 x N_class]
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  // images: [N x H x W x 3] with H, W divisible by 32. Levels at OS 8/16/32;
  // in dilated mode the last two stages keep OS8 and use dilation instead.
  FeaturePyramid backbone_forward(const Tensor& images) const;

  ModelOutput forward(const Tensor& images, bool training);

  // Argmax of the logits upsampled to input resolution, one field per image.
  std::vector<LabelField> predict(const Tensor& images);

  ParamList parameters();
  std::size_t parameter_count();
  const ModelConfig& config() const { return cfg_; }

  std::vector<Conv2d> backbone;  // stem followed by the four stages
  Ejpu ejpu;
  SyncedAxialAttention mixer;
  Conv2d head;

 private:
  ModelConfig cfg_;
};

// Per-pixel linear classifier (1x1 convolution with bias).
Tensor head_logits(const Tensor& features, const Conv2d& head);

// Softmax cross-entropy averaged over non-ignored pixels. logits [N x H x W x K]
// (or [H x W x K] with one label field) at the labels' resolution.
LossTerm ce_loss(const Tensor& logits, std::span<const LabelField> labels);

double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double power = 0.9);

struct TrainConfig {
  std::size_t iters = 300;
  std::size_t batch_size = 8;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  double poly_power = 0.9;
  bool ce_full_resolution = true;
};

class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const ParamList& params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct Batch {
  Tensor images;  // [N x H x W x 3]
  std::vector<LabelField> labels;
};

struct StepMetrics {
  double ce = 0.0;
  double intra = 0.0;
  double c2c = 0.0;
  double c2p = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

// One SGD step on CE + weighted CAR terms (CAR skipped entirely when
// car_enabled is false). Throws NumericError on a non-finite loss.
StepMetrics train_step(const Batch& batch, Model& model, const CarConfig& car, bool car_enabled,
                       Sgd& optimizer, std::size_t iter, const TrainConfig& train);

}  // namespace card
