#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "card/label_field.hpp"
#include "card/tensor.hpp"

namespace card {

// Spatially flattened features with their one-hot mask and ignore mask.
struct FlatPair {
  Tensor x_flat;  // [P x C]
  Tensor y_flat;  // [P x N_class], all-zero rows at ignored pixels
  Tensor sigma;   // [P], 1 at ignored pixels
  std::vector<int> labels;  // flattened labels, kIgnore preserved
  std::size_t num_classes = 0;
};

// Per-class mean features computed from ground truth.
struct ClassCenters {
  Tensor mu;  // [N_class x C]; absent rows are zero
  std::vector<bool> present;
  std::vector<std::int64_t> counts;

  std::size_t num_classes() const { return present.size(); }
  std::size_t num_present() const;
  std::vector<std::size_t> present_indices() const;
};

// x: [H x W x C] with labels at the same H x W. Callers downsample labels
// to feature resolution first (LabelField::downsample_nearest).
FlatPair flatten_pair(const Tensor& x, const LabelField& labels);

// x: [N x H x W x C]; one label field per image. Produces a single pair whose
// rows are the images' pixels in order.
FlatPair flatten_batch(const Tensor& x, std::span<const LabelField> labels);

// Averages features per class over every pixel of every pair. Gradients flow
// into the features through mu unless grad_through_centers is false.
ClassCenters batch_centers(std::span<const FlatPair> batch, bool grad_through_centers = true);

// Row i is mu[label(i)], or zero for ignored rows.
Tensor distribute_centers(const Tensor& y_flat, const ClassCenters& centers);

}  // namespace card
