#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "card/tensor.hpp"

namespace card {

struct GradCheckResult {
  // Worst norm-wise relative error over all inputs:
  //   |autodiff - numeric| / max(|autodiff|, |numeric|, floor)
  double max_rel_err = 0.0;
  std::vector<double> per_input;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of a scalar-valued `f` against central
// finite differences with step h. Only inputs that require grad are checked.
// The inputs must be leaves; their data is perturbed in place and restored.
GradCheckResult check_gradients(const ScalarFn& f, std::vector<Tensor> inputs,
                                double h = 1e-5, double floor = 1e-6);

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0,
                     bool requires_grad = true);

struct GradSuiteEntry {
  std::string name;
  double max_rel_err = 0.0;
  int seeds = 0;
};

// Runs the built-in finite-difference suite over the differentiable
// primitives, the regularization losses, and the decoder blocks.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, int seeds_per_op);

}  // namespace card
