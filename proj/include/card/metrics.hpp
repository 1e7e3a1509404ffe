#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "card/dataset.hpp"
#include "card/label_field.hpp"
#include "card/model.hpp"

namespace card {

// Rows are ground truth, columns are predictions. Ignored ground-truth
// pixels are skipped.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  void add(const LabelField& prediction, const LabelField& ground_truth);
  void merge(const ConfusionMatrix& other);

  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return m_[truth * n_ + predicted]; }
  std::size_t num_classes() const { return n_; }

  // TP / (TP + FP + FN); empty when the class occurs in neither.
  std::optional<double> iou(std::size_t k) const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> m_;
};

struct IouReport {
  std::vector<std::optional<double>> per_class;
  double miou = 0.0;
  std::size_t images = 0;
};

IouReport iou_report(const ConfusionMatrix& cm, std::size_t images);

// Throws ConfigError on an empty split.
IouReport eval_miou(Model& model, std::span<const Sample> split, std::size_t batch_size = 16);

}  // namespace card
