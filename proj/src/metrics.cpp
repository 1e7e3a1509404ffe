#include "card/metrics.hpp"

#include "card/error.hpp"

namespace card {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : n_(num_classes), m_(num_classes * num_classes, 0) {}

void ConfusionMatrix::add(const LabelField& prediction, const LabelField& ground_truth) {
  if (prediction.height != ground_truth.height || prediction.width != ground_truth.width) {
    throw ShapeError("prediction and ground truth differ in size");
  }
  for (std::size_t i = 0; i < ground_truth.pixels(); ++i) {
    const int t = ground_truth.labels[i];
    const int p = prediction.labels[i];
    if (t == LabelField::kIgnore) continue;
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= n_ || static_cast<std::size_t>(p) >= n_) {
      throw ShapeError("label outside confusion matrix range");
    }
    ++m_[static_cast<std::size_t>(t) * n_ + static_cast<std::size_t>(p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ShapeError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < m_.size(); ++i) m_[i] += other.m_[i];
}

std::optional<double> ConfusionMatrix::iou(std::size_t k) const {
  std::uint64_t tp = at(k, k), fp = 0, fn = 0;
  for (std::size_t j = 0; j < n_; ++j) {
    if (j == k) continue;
    fp += at(j, k);
    fn += at(k, j);
  }
  const std::uint64_t denom = tp + fp + fn;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(denom);
}

IouReport iou_report(const ConfusionMatrix& cm, std::size_t images) {
  IouReport r;
  r.images = images;
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) {
    r.per_class.push_back(cm.iou(k));
    if (r.per_class.back()) {
      sum += *r.per_class.back();
      ++counted;
    }
  }
  r.miou = counted ? sum / static_cast<double>(counted) : 0.0;
  return r;
}

IouReport eval_miou(Model& model, std::span<const Sample> split, std::size_t batch_size) {
  if (split.empty()) throw ConfigError("cannot evaluate mIOU on an empty split");
  ConfusionMatrix cm(model.config().num_classes);
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    const Batch b = make_batch(split.subspan(start, end - start));
    const auto preds = model.predict(b.images);
    for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], b.labels[i]);
  }
  return iou_report(cm, split.size());
}

}  // namespace card
