#include "card/class_centers.hpp"

#include <string>

#include "card/error.hpp"
#include "card/ops.hpp"

namespace card {

std::size_t ClassCenters::num_present() const {
  std::size_t n = 0;
  for (bool p : present) n += p ? 1 : 0;
  return n;
}

std::vector<std::size_t> ClassCenters::present_indices() const {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < present.size(); ++k)
    if (present[k]) idx.push_back(k);
  return idx;
}

namespace {

FlatPair make_pair(Tensor x_flat, std::vector<int> labels, std::size_t num_classes) {
  FlatPair p;
  p.num_classes = num_classes;
  p.y_flat = ops::one_hot(labels, num_classes, LabelField::kIgnore);
  std::vector<double> sigma(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) sigma[i] = labels[i] == LabelField::kIgnore ? 1.0 : 0.0;
  p.sigma = Tensor({labels.size()}, std::move(sigma));
  p.x_flat = std::move(x_flat);
  p.labels = std::move(labels);
  return p;
}

}  // namespace

FlatPair flatten_pair(const Tensor& x, const LabelField& labels) {
  if (x.rank() != 3) throw ShapeError("flatten_pair expects HxWxC, got " + shape_string(x.shape()));
  if (x.dim(0) != labels.height || x.dim(1) != labels.width) {
    throw ShapeError("label field " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " does not match features " +
                     shape_string(x.shape()));
  }
  labels.validate();
  const std::size_t p = x.dim(0) * x.dim(1);
  return make_pair(ops::reshape(x, {p, x.dim(2)}), labels.labels, labels.num_classes);
}

FlatPair flatten_batch(const Tensor& x, std::span<const LabelField> labels) {
  if (x.rank() != 4) throw ShapeError("flatten_batch expects NxHxWxC, got " + shape_string(x.shape()));
  if (labels.size() != x.dim(0)) {
    throw ShapeError("flatten_batch: " + std::to_string(labels.size()) + " label fields for batch of " +
                     std::to_string(x.dim(0)));
  }
  std::vector<int> all;
  const std::size_t n_class = labels.empty() ? 0 : labels[0].num_classes;
  for (const auto& l : labels) {
    if (l.height != x.dim(1) || l.width != x.dim(2) || l.num_classes != n_class) {
      throw ShapeError("flatten_batch: label field does not match features " + shape_string(x.shape()));
    }
    l.validate();
    all.insert(all.end(), l.labels.begin(), l.labels.end());
  }
  const std::size_t p = x.dim(0) * x.dim(1) * x.dim(2);
  return make_pair(ops::reshape(x, {p, x.dim(3)}), std::move(all), n_class);
}

ClassCenters batch_centers(std::span<const FlatPair> batch, bool grad_through_centers) {
  if (batch.empty()) throw ShapeError("batch_centers: empty batch");
  const std::size_t n_class = batch[0].num_classes;
  const std::size_t c = batch[0].x_flat.dim(1);
  for (const auto& p : batch) {
    if (p.num_classes != n_class || p.x_flat.dim(1) != c) {
      throw ShapeError("batch_centers: inconsistent channel or class count across batch");
    }
  }

  Tensor x_all = batch[0].x_flat;
  Tensor y_all = batch[0].y_flat;
  if (batch.size() > 1) {
    std::vector<Tensor> xs, ys;
    for (const auto& p : batch) {
      xs.push_back(p.x_flat);
      ys.push_back(p.y_flat);
    }
    x_all = ops::concat(xs, 0);
    y_all = ops::concat(ys, 0);
  }

  ClassCenters centers;
  centers.counts.assign(n_class, 0);
  for (const auto& p : batch)
    for (int l : p.labels)
      if (l != LabelField::kIgnore) ++centers.counts[static_cast<std::size_t>(l)];
  centers.present.resize(n_class);
  std::vector<double> inv(n_class, 0.0);
  for (std::size_t k = 0; k < n_class; ++k) {
    centers.present[k] = centers.counts[k] > 0;
    if (centers.present[k]) inv[k] = 1.0 / static_cast<double>(centers.counts[k]);
  }

  Tensor sums = ops::matmul(ops::transpose(y_all), x_all);
  Tensor mu = ops::mul(sums, Tensor({n_class, 1}, std::move(inv)));
  centers.mu = grad_through_centers ? mu : ops::stop_gradient(mu);
  return centers;
}

Tensor distribute_centers(const Tensor& y_flat, const ClassCenters& centers) {
  return ops::matmul(y_flat, centers.mu);
}

}  // namespace card
