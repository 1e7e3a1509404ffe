#pragma once

#include <span>

#include "card/class_centers.hpp"
#include "card/tensor.hpp"

namespace card {

// How the inter-class excess terms are reduced to a scalar.
enum class InterReduction {
  // Sum clamped excess over the class axis per row, then mean of the squared
  // row sums over present classes (c2c) or labelled pixels (c2p).
  kRowSumThenMean,
  // Mean of squared clamped excess over every retained (row, class) entry.
  kElementwiseMean,
};

struct CarConfig {
  double eps0 = 0.5;   // center-to-center margin numerator
  double eps1 = 0.25;  // center-to-pixel margin numerator
  double w_intra = 1.0;
  double w_c2c = 1.0;
  double w_c2p = 1.0;
  bool grad_through_centers = true;
  InterReduction reduction = InterReduction::kRowSumThenMean;

  void validate() const;
  bool enabled() const { return w_intra > 0 || w_c2c > 0 || w_c2p > 0; }
};

struct LossTerm {
  Tensor value;  // scalar
  bool vacuous = false;  // nothing to regularize (no labelled pixels / < 2 classes)
};

// Mean squared distance between each labelled pixel and its class center.
LossTerm intra_c2p_loss(const FlatPair& flat, const ClassCenters& centers);

// Penalizes softmax-normalized center similarities above eps0 / (N_class - 1).
LossTerm inter_c2c_loss(const ClassCenters& centers, const CarConfig& cfg);

// Penalizes pixel-to-other-center similarities above eps1 / (N_class - 1),
// with each pixel's own-class score replaced by its center's self product.
LossTerm inter_c2p_loss(const FlatPair& flat, const ClassCenters& centers, const CarConfig& cfg);

struct CarParts {
  LossTerm intra;
  LossTerm c2c;
  LossTerm c2p;
};

struct CarResult {
  CarParts parts;
  Tensor total;  // weighted sum
  double intra = 0.0;
  double c2c = 0.0;
  double c2p = 0.0;
};

Tensor car_total(const CarParts& parts, const CarConfig& cfg);

// Centers from the whole batch, then all three terms and their weighted sum.
CarResult car_losses(std::span<const FlatPair> batch, const CarConfig& cfg);

}  // namespace card
