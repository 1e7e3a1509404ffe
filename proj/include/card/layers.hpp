#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "card/ops.hpp"
#include "card/tensor.hpp"

namespace card {

// A named tensor owned by some module. `trainable` is false for running
// statistics, which are checkpointed but not optimized.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
  bool trainable;
};

using ParamList = std::vector<NamedTensor>;

// He-normal k x k x (cin/groups) x cout weight.
Tensor he_normal(std::size_t k, std::size_t cin_per_group, std::size_t cout, std::mt19937_64& rng);
Tensor normal_weight(Shape shape, double std, std::mt19937_64& rng);

struct Conv2d {
  Tensor weight;
  std::optional<Tensor> bias;
  ops::Conv2dOptions options;

  Conv2d() = default;
  Conv2d(std::size_t k, std::size_t cin, std::size_t cout, ops::Conv2dOptions opt, bool with_bias,
         std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix);
};

// Per-channel normalization over every non-channel axis using batch statistics
// in training; running averages at inference.
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double gamma_init = 1.0);

  Tensor forward(const Tensor& x, bool training);
  void collect(ParamList& out, const std::string& prefix);
};

}  // namespace card
