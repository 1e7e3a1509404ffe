#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "card/layers.hpp"
#include "card/tensor.hpp"

namespace card {

// Backbone features ordered from output stride 8 upwards (8, 16, 32).
// Each level is [N x H x W x C].
struct FeaturePyramid {
  std::vector<Tensor> levels;

  void validate() const;
  const Tensor& top() const { return levels.back(); }
};

struct EjpuConfig {
  std::vector<std::size_t> level_channels;  // per pyramid level, OS8 first
  std::size_t width = 8;                    // per-level channel count inside JPU
  std::size_t c_out = 64;
  std::vector<std::size_t> dilations{1, 2, 4, 8};
  double calibration_init_std = 1e-2;
  double calibration_gamma_init = 0.1;
};

// Channel padding module: pads the channel axis with a broadcast projection
// of the global average, then mixes all channels with one 1x1 convolution.
struct ChannelPadding {
  Tensor projection;  // [Cin x (C_t - Cin)]
  Tensor mix;         // [1 x 1 x C_t x C_t], identity at init
  std::size_t cin = 0;
  std::size_t target = 0;

  ChannelPadding() = default;
  ChannelPadding(std::size_t cin, std::size_t target, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix);
};

class Ejpu {
 public:
  Ejpu() = default;
  Ejpu(EjpuConfig cfg, std::mt19937_64& rng);

  // Multi-level fusion at OS8 followed by the parallel dilated separable
  // convolutions; [N x H8 x W8 x dilations*width]. The top level enters
  // through stop_gradient.
  Tensor jpu_branch(const FeaturePyramid& pyr, bool training);

  // Residual bilinear path (padded to c_out when narrower) plus the
  // calibrated JPU branch; [N x H8 x W8 x c_out].
  Tensor forward(const FeaturePyramid& pyr, bool training);

  const EjpuConfig& config() const { return cfg_; }
  void collect(ParamList& out, const std::string& prefix);

  struct Separable {
    Tensor depthwise;  // [3 x 3 x 1 x L*width]
    Tensor pointwise;  // [1 x 1 x L*width x width]
    BatchNorm bn;
    std::size_t dilation = 1;
  };

  std::vector<Conv2d> level_convs;
  std::vector<BatchNorm> level_bns;
  std::vector<Separable> separables;
  Conv2d calibration;
  BatchNorm calibration_bn;
  std::optional<ChannelPadding> cpm;

 private:
  EjpuConfig cfg_;
};

// Free-function form of the channel padding contract: identity when Cin
// equals target, error when Cin exceeds it.
Tensor cpm_pad(const Tensor& x, const ChannelPadding& cpm, std::size_t target);

}  // namespace card
