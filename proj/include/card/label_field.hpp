#pragma once

#include <cstddef>
#include <vector>

namespace card {

// Per-pixel integer class labels, row-major, with an ignore sentinel.
struct LabelField {
  static constexpr int kIgnore = 255;

  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<int> labels;

  LabelField() = default;
  LabelField(std::size_t h, std::size_t w, std::size_t n_class, std::vector<int> values);

  int at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  std::size_t pixels() const { return labels.size(); }

  // Throws ShapeError if a label is neither a valid class nor kIgnore.
  void validate() const;

  // Nearest-neighbour sampling at output pixel centres; never blends labels.
  LabelField downsample_nearest(std::size_t out_h, std::size_t out_w) const;
};

}  // namespace card
