#include "card/label_field.hpp"

#include <algorithm>
#include <string>

#include "card/error.hpp"

namespace card {

LabelField::LabelField(std::size_t h, std::size_t w, std::size_t n_class, std::vector<int> values)
    : height(h), width(w), num_classes(n_class), labels(std::move(values)) {
  if (labels.size() != h * w) {
    throw ShapeError("label field has " + std::to_string(labels.size()) + " values for " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  validate();
}

void LabelField::validate() const {
  for (int l : labels) {
    if (l == kIgnore) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ShapeError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) +
                       ") and not the ignore value");
    }
  }
}

LabelField LabelField::downsample_nearest(std::size_t out_h, std::size_t out_w) const {
  if (out_h == 0 || out_w == 0) throw ShapeError("downsample_nearest: zero target extent");
  std::vector<int> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(height - 1, (2 * y + 1) * height / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(width - 1, (2 * x + 1) * width / (2 * out_w));
      out[y * out_w + x] = labels[sy * width + sx];
    }
  }
  LabelField result;
  result.height = out_h;
  result.width = out_w;
  result.num_classes = num_classes;
  result.labels = std::move(out);
  return result;
}

}  // namespace card
