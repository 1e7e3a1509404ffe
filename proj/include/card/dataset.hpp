#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "card/label_field.hpp"
#include "card/model.hpp"

namespace card {

enum class ShapeKind { kRect, kDisc };

// An image's class combination: one class fills the background, another
// forms a single foreground shape.
struct ClassPair {
  int background = 0;
  int foreground = 0;
  bool operator==(const ClassPair&) const = default;
};

// Synthetic dataset with biased class co-occurrence. Training images only use
// train_pairs; the test split mixes train pairs with held-out pairs.
struct BiasSpec {
  std::size_t num_classes = 4;
  std::size_t image_size = 64;
  std::size_t train_images = 64;
  std::size_t test_images = 32;
  std::vector<ClassPair> train_pairs{{0, 2}, {1, 3}};
  std::vector<ClassPair> heldout_pairs{{0, 3}, {1, 2}};
  std::vector<ShapeKind> shapes{ShapeKind::kRect, ShapeKind::kDisc};
  double fg_fraction = 0.3;        // target foreground area per image
  double heldout_test_fraction = 0.5;
  double noise_std = 0.08;         // per-pixel Gaussian, on a [0, 1] scale
  double fg_gap = 0.25;            // colour distance between foreground classes
  double texture_amp = 0.06;       // stripe texture amplitude
  std::size_t ignore_border = 0;   // width of the ignore ring inside each shape

  void validate() const;
};

struct Sample {
  std::vector<std::uint8_t> rgb;  // H x W x 3
  LabelField labels;
  ClassPair pair;
  bool heldout = false;
};

struct Dataset {
  BiasSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

Dataset gen_dataset(const BiasSpec& spec, std::uint64_t seed);

// Expected label frequencies per class for a split of the given composition,
// ignoring shape-rasterization error.
std::vector<double> expected_frequencies(const BiasSpec& spec, bool train_split);

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices);
Batch make_batch(std::span<const Sample> samples);

// One directory per split: NNNNNN.ppm (P6), NNNNNN.pgm (P5, 255 = ignore),
// plus index.csv with the class pair of every image.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir, const BiasSpec& spec);

}  // namespace card
