#include "card/car_losses.hpp"

#include <cmath>
#include <string>

#include "card/error.hpp"
#include "card/ops.hpp"

namespace card {

void CarConfig::validate() const {
  if (eps0 < 0 || eps1 < 0) throw ConfigError("CAR margins eps0/eps1 must be >= 0");
  if (w_intra < 0 || w_c2c < 0 || w_c2p < 0) throw ConfigError("CAR loss weights must be >= 0");
}

namespace {

LossTerm vacuous_zero() { return {Tensor::scalar(0.0), true}; }

std::size_t labelled_rows(const FlatPair& flat) {
  std::size_t n = 0;
  for (int l : flat.labels) n += l != LabelField::kIgnore ? 1 : 0;
  return n;
}

// [P x 1] column of (1 - sigma).
Tensor valid_column(const FlatPair& flat) {
  std::vector<double> v(flat.labels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = flat.labels[i] == LabelField::kIgnore ? 0.0 : 1.0;
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

Tensor ones_minus(const Tensor& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  for (auto& x : v) x = 1.0 - x;
  return Tensor(t.shape(), std::move(v));
}

FlatPair merge(std::span<const FlatPair> batch) {
  if (batch.size() == 1) return batch[0];
  FlatPair m;
  m.num_classes = batch[0].num_classes;
  std::vector<Tensor> xs, ys, ss;
  for (const auto& p : batch) {
    xs.push_back(p.x_flat);
    ys.push_back(p.y_flat);
    ss.push_back(p.sigma);
    m.labels.insert(m.labels.end(), p.labels.begin(), p.labels.end());
  }
  m.x_flat = ops::concat(xs, 0);
  m.y_flat = ops::concat(ys, 0);
  m.sigma = ops::concat(ss, 0);
  return m;
}

}  // namespace

LossTerm intra_c2p_loss(const FlatPair& flat, const ClassCenters& centers) {
  const std::size_t n_valid = labelled_rows(flat);
  if (n_valid == 0) return vacuous_zero();
  const std::size_t c = flat.x_flat.dim(1);
  Tensor diff = ops::abs(ops::sub(distribute_centers(flat.y_flat, centers), flat.x_flat));
  Tensor masked = ops::mul(diff, valid_column(flat));
  Tensor loss = ops::mul_scalar(ops::sum_all(ops::square(masked)),
                                1.0 / static_cast<double>(n_valid * c));
  return {loss, false};
}

LossTerm inter_c2c_loss(const ClassCenters& centers, const CarConfig& cfg) {
  const std::size_t n_class = centers.num_classes();
  const auto present = centers.present_indices();
  const std::size_t m = present.size();
  if (n_class < 2 || m < 2) return vacuous_zero();

  const double c = static_cast<double>(centers.mu.dim(1));
  const double margin = cfg.eps0 / static_cast<double>(n_class - 1);

  Tensor mu = ops::index_select(centers.mu, 0, present);
  Tensor logits = ops::mul_scalar(ops::matmul(mu, ops::transpose(mu)), 1.0 / std::sqrt(c));
  Tensor sim = ops::softmax(logits, 1);
  std::vector<double> off(m * m, 1.0);
  for (std::size_t k = 0; k < m; ++k) off[k * m + k] = 0.0;
  Tensor off_diag = ops::mul(sim, Tensor({m, m}, std::move(off)));
  Tensor excess = ops::hinge(off_diag, margin);

  if (cfg.reduction == InterReduction::kElementwiseMean) {
    return {ops::mul_scalar(ops::sum_all(ops::square(excess)), 1.0 / static_cast<double>(m * (m - 1))),
            false};
  }
  return {ops::mean_all(ops::square(ops::sum(excess, {1}))), false};
}

LossTerm inter_c2p_loss(const FlatPair& flat, const ClassCenters& centers, const CarConfig& cfg) {
  const std::size_t n_class = centers.num_classes();
  const std::size_t n_valid = labelled_rows(flat);
  if (n_class < 2 || n_valid == 0) return vacuous_zero();
  const auto present = centers.present_indices();
  const std::size_t m = present.size();
  const double margin = cfg.eps1 / static_cast<double>(n_class - 1);

  Tensor mu = ops::index_select(centers.mu, 0, present);
  Tensor own = ops::index_select(flat.y_flat, 1, present);  // [P x m], constant
  Tensor others = ones_minus(own);

  // X_flat . mu^T, laid out [P x m].
  Tensor scores = ops::matmul(flat.x_flat, ops::transpose(mu));
  Tensor self_products = ops::reshape(ops::sum(ops::square(mu), {1}), {1, m});
  Tensor replaced = ops::add(ops::mul(scores, others), ops::mul(own, self_products));
  Tensor sim = ops::softmax(replaced, 1);
  Tensor excess = ops::hinge(ops::mul(sim, others), margin);
  Tensor valid = valid_column(flat);

  if (cfg.reduction == InterReduction::kElementwiseMean) {
    if (m < 2) return vacuous_zero();
    Tensor sq = ops::mul(ops::square(excess), valid);
    return {ops::mul_scalar(ops::sum_all(sq), 1.0 / static_cast<double>(n_valid * (m - 1))), false};
  }
  Tensor row = ops::reshape(ops::sum(excess, {1}), {flat.labels.size(), 1});
  Tensor sq = ops::mul(ops::square(row), valid);
  return {ops::mul_scalar(ops::sum_all(sq), 1.0 / static_cast<double>(n_valid)), false};
}

Tensor car_total(const CarParts& parts, const CarConfig& cfg) {
  Tensor t = ops::mul_scalar(parts.intra.value, cfg.w_intra);
  t = ops::add(t, ops::mul_scalar(parts.c2c.value, cfg.w_c2c));
  return ops::add(t, ops::mul_scalar(parts.c2p.value, cfg.w_c2p));
}

CarResult car_losses(std::span<const FlatPair> batch, const CarConfig& cfg) {
  cfg.validate();
  const ClassCenters centers = batch_centers(batch, cfg.grad_through_centers);
  const FlatPair all = merge(batch);
  CarResult r;
  r.parts.intra = intra_c2p_loss(all, centers);
  r.parts.c2c = inter_c2c_loss(centers, cfg);
  r.parts.c2p = inter_c2p_loss(all, centers, cfg);
  r.total = car_total(r.parts, cfg);
  r.intra = r.parts.intra.value.item();
  r.c2c = r.parts.c2c.value.item();
  r.c2p = r.parts.c2p.value.item();
  return r;
}

}  // namespace card
