#include "card/saa.hpp"

#include <cmath>

#include "card/error.hpp"
#include "card/ops.hpp"

namespace card {

double AttentionConfig::scale() const { return 1.0 / std::sqrt(static_cast<double>(d_head())); }

void AttentionConfig::validate() const {
  if (heads == 0 || d_model == 0 || d_model % heads != 0) {
    throw ConfigError("attention d_model " + std::to_string(d_model) + " not divisible by heads " +
                      std::to_string(heads));
  }
}

Tensor cpe(const Tensor& x, const Tensor& depthwise_weight) {
  const std::size_t c = x.dim(x.rank() - 1);
  return ops::add(x, ops::conv2d(x, depthwise_weight, {.stride = 1, .dilation = 1, .groups = c}));
}

SyncedAxialAttention::SyncedAxialAttention(AttentionConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c = cfg_.d_model;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(c));
  cpe_weight = normal_weight({3, 3, 1, c}, 0.1, rng);
  wq = normal_weight({1, 1, c, c}, proj_std, rng);
  wk = normal_weight({1, 1, c, c}, proj_std, rng);
  wv = normal_weight({1, 1, c, c}, proj_std, rng);
  wo = normal_weight({1, 1, c, c}, proj_std, rng);
}

Tensor SyncedAxialAttention::forward(const Tensor& x, SaaProbe* probe) const {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw ShapeError("SAA expects HxWxC or NxHxWxC, got " + shape_string(x.shape()));
  const Tensor x4 = batched ? x : ops::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  const std::size_t n = x4.dim(0), h = x4.dim(1), w = x4.dim(2), c = x4.dim(3);
  if (c != cfg_.d_model) {
    throw ShapeError("SAA configured for " + std::to_string(cfg_.d_model) + " channels, got " +
                     shape_string(x.shape()));
  }
  const std::size_t heads = cfg_.heads, d = cfg_.d_head();
  const double scale = cfg_.scale();

  const Tensor p = cpe(x4, cpe_weight);
  const Tensor q = ops::conv2d(p, wq);
  const Tensor k = ops::conv2d(p, wk);
  const Tensor v = ops::conv2d(p, wv);

  // [N x H x W x C] -> per-head sequences along one axis.
  auto columns = [&](const Tensor& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {n, h, w, heads, d}), {0, 3, 2, 1, 4}),
                        {n * heads * w, h, d});
  };
  auto rows = [&](const Tensor& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {n, h, w, heads, d}), {0, 3, 1, 2, 4}),
                        {n * heads * h, w, d});
  };
  auto attend = [&](const Tensor& qs, const Tensor& ks) {
    return ops::softmax(ops::mul_scalar(ops::bmm(qs, ks, true), scale), 2);
  };

  const Tensor a_col = attend(columns(q), columns(k));
  const Tensor a_row = attend(rows(q), rows(k));
  if (probe) {
    probe->column = a_col;
    probe->row = a_row;
  }

  Tensor merged;
  if (cfg_.column_first) {
    Tensor mixed = ops::bmm(a_col, columns(v));  // [N*heads*W x H x d]
    mixed = ops::reshape(ops::permute(ops::reshape(mixed, {n, heads, w, h, d}), {0, 1, 3, 2, 4}),
                         {n * heads * h, w, d});
    Tensor out = ops::bmm(a_row, mixed);  // [N*heads*H x W x d]
    merged = ops::reshape(ops::permute(ops::reshape(out, {n, heads, h, w, d}), {0, 2, 3, 1, 4}),
                          {n, h, w, c});
  } else {
    Tensor mixed = ops::bmm(a_row, rows(v));  // [N*heads*H x W x d]
    mixed = ops::reshape(ops::permute(ops::reshape(mixed, {n, heads, h, w, d}), {0, 1, 3, 2, 4}),
                         {n * heads * w, h, d});
    Tensor out = ops::bmm(a_col, mixed);  // [N*heads*W x H x d]
    merged = ops::reshape(ops::permute(ops::reshape(out, {n, heads, w, h, d}), {0, 3, 2, 1, 4}),
                          {n, h, w, c});
  }
  Tensor y = ops::conv2d(merged, wo);
  return batched ? y : ops::reshape(y, {h, w, c});
}

void SyncedAxialAttention::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".cpe", &cpe_weight, true});
  out.push_back({prefix + ".wq", &wq, true});
  out.push_back({prefix + ".wk", &wk, true});
  out.push_back({prefix + ".wv", &wv, true});
  out.push_back({prefix + ".wo", &wo, true});
}

std::uint64_t attention_flops(std::size_t h, std::size_t w, std::size_t c, AttentionVariant v) {
  if (h == 0 || w == 0 || c == 0) throw ConfigError("attention_flops needs positive dimensions");
  const std::uint64_t hw = static_cast<std::uint64_t>(h) * w;
  if (v == AttentionVariant::kDense) return 2 * hw * hw * c;
  return 2 * hw * (static_cast<std::uint64_t>(h) + w) * c;
}

}  // namespace card
