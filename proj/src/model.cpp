#include "card/model.hpp"

#include <cmath>
#include <sstream>

#include "card/class_centers.hpp"
#include "card/error.hpp"
#include "card/ops.hpp"

namespace card {

std::string to_string(Upsampler u) { return u == Upsampler::kEjpu ? "ejpu" : "dilated"; }

Upsampler parse_upsampler(const std::string& s) {
  if (s == "ejpu") return Upsampler::kEjpu;
  if (s == "dilated") return Upsampler::kDilated;
  throw ConfigError("unknown upsampler '" + s + "' (expected ejpu or dilated)");
}

void ModelConfig::validate() const {
  if (stage_channels.size() != 4) throw ConfigError("model needs exactly four backbone stages");
  if (num_classes < 1) throw ConfigError("model needs at least one class");
  if (heads == 0 || c_out % heads != 0) {
    throw ConfigError("c_out " + std::to_string(c_out) + " not divisible by heads " + std::to_string(heads));
  }
  if (upsampler == Upsampler::kDilated && stage_channels.back() != c_out) {
    throw ConfigError("dilated mode feeds the last stage straight to the mixer; its channels must equal c_out");
  }
  if (stage_channels.back() > c_out) throw ConfigError("last stage wider than c_out");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "stem=" << stem_channels << ";stages=";
  for (std::size_t i = 0; i < stage_channels.size(); ++i) os << (i ? "," : "") << stage_channels[i];
  os << ";width=" << decoder_width << ";c_out=" << c_out << ";heads=" << heads
     << ";classes=" << num_classes << ";upsampler=" << to_string(upsampler);
  return os.str();
}

std::uint64_t ModelConfig::digest() const {
  // FNV-1a, 64-bit.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const bool dilated = cfg_.upsampler == Upsampler::kDilated;
  backbone.emplace_back(3, 3, cfg_.stem_channels, ops::Conv2dOptions{.stride = 2}, true, rng);
  std::size_t cin = cfg_.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    ops::Conv2dOptions opt{.stride = 2};
    if (dilated && s >= 2) opt = {.stride = 1, .dilation = s == 2 ? 2u : 4u};
    backbone.emplace_back(3, cin, cfg_.stage_channels[s], opt, true, rng);
    cin = cfg_.stage_channels[s];
  }
  if (!dilated) {
    EjpuConfig ec;
    ec.level_channels = {cfg_.stage_channels[1], cfg_.stage_channels[2], cfg_.stage_channels[3]};
    ec.width = cfg_.decoder_width;
    ec.c_out = cfg_.c_out;
    ejpu = Ejpu(ec, rng);
  }
  mixer = SyncedAxialAttention(AttentionConfig{.heads = cfg_.heads, .d_model = cfg_.c_out}, rng);
  head = Conv2d(1, cfg_.c_out, cfg_.num_classes, {}, true, rng);
}

FeaturePyramid Model::backbone_forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(3) != 3) {
    throw ShapeError("backbone expects NxHxWx3 images, got " + shape_string(images.shape()));
  }
  if (images.dim(1) % 32 != 0 || images.dim(2) % 32 != 0) {
    throw ShapeError("image extents must be divisible by 32, got " + shape_string(images.shape()));
  }
  FeaturePyramid pyr;
  Tensor x = images;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    x = ops::relu(backbone[i].forward(x));
    if (i >= 2) pyr.levels.push_back(x);
  }
  return pyr;
}

Tensor head_logits(const Tensor& features, const Conv2d& head) { return head.forward(features); }

ModelOutput Model::forward(const Tensor& images, bool training) {
  const FeaturePyramid pyr = backbone_forward(images);
  const Tensor decoded = cfg_.upsampler == Upsampler::kEjpu ? ejpu.forward(pyr, training) : pyr.top();
  ModelOutput out;
  out.features = ops::add(decoded, mixer.forward(decoded));
  out.logits = head_logits(out.features, head);
  return out;
}

std::vector<LabelField> Model::predict(const Tensor& images) {
  NoGradGuard no_grad;
  const ModelOutput out = forward(images, false);
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), k = cfg_.num_classes;
  const Tensor up = ops::bilinear_resize(out.logits, h, w);
  const auto L = up.data();
  std::vector<LabelField> result;
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<int> labels(h * w);
    for (std::size_t p = 0; p < h * w; ++p) {
      const double* row = L.data() + (b * h * w + p) * k;
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (row[c] > row[best]) best = c;
      labels[p] = static_cast<int>(best);
    }
    result.emplace_back(h, w, k, std::move(labels));
  }
  return result;
}

ParamList Model::parameters() {
  ParamList out;
  for (std::size_t i = 0; i < backbone.size(); ++i)
    backbone[i].collect(out, i == 0 ? "backbone.stem" : "backbone.stage" + std::to_string(i));
  if (cfg_.upsampler == Upsampler::kEjpu) ejpu.collect(out, "ejpu");
  mixer.collect(out, "saa");
  head.collect(out, "head");
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters())
    if (p.trainable) n += p.tensor->size();
  return n;
}

LossTerm ce_loss(const Tensor& logits, std::span<const LabelField> labels) {
  const Tensor l4 = logits.rank() == 3 ? ops::reshape(logits, {1, logits.dim(0), logits.dim(1), logits.dim(2)})
                                       : logits;
  if (l4.rank() != 4 || labels.size() != l4.dim(0)) {
    throw ShapeError("ce_loss: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " label fields");
  }
  const std::size_t k = l4.dim(3);
  std::vector<int> all;
  for (const auto& l : labels) {
    if (l.height != l4.dim(1) || l.width != l4.dim(2)) {
      throw ShapeError("ce_loss: label field resolution does not match logits " + shape_string(logits.shape()));
    }
    all.insert(all.end(), l.labels.begin(), l.labels.end());
  }
  std::size_t valid = 0;
  for (int v : all) valid += v != LabelField::kIgnore ? 1 : 0;
  if (valid == 0) return {Tensor::scalar(0.0), true};
  const Tensor logp = ops::reshape(ops::log_softmax(l4, 3), {all.size(), k});
  const Tensor picked = ops::sum_all(ops::mul(logp, ops::one_hot(all, k, LabelField::kIgnore)));
  return {ops::mul_scalar(picked, -1.0 / static_cast<double>(valid)), false};
}

double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double power) {
  if (max_iter == 0 || iter >= max_iter) return 0.0;
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

void Sgd::step(const ParamList& params, double lr) {
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.trainable ? p.tensor->size() : 0, 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor& t = *params[i].tensor;
    auto w = t.mutable_data();
    const auto g = t.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j] + weight_decay_ * w[j];
      w[j] -= lr * v[j];
    }
  }
}

StepMetrics train_step(const Batch& batch, Model& model, const CarConfig& car, bool car_enabled,
                       Sgd& optimizer, std::size_t iter, const TrainConfig& train) {
  const ParamList params = model.parameters();
  for (const auto& p : params) p.tensor->zero_grad();

  const ModelOutput out = model.forward(batch.images, true);
  const std::size_t h8 = out.logits.dim(1), w8 = out.logits.dim(2);
  std::vector<LabelField> coarse;
  for (const auto& l : batch.labels) coarse.push_back(l.downsample_nearest(h8, w8));

  StepMetrics m;
  LossTerm ce;
  if (train.ce_full_resolution) {
    const Tensor up = ops::bilinear_resize(out.logits, batch.images.dim(1), batch.images.dim(2));
    ce = ce_loss(up, batch.labels);
  } else {
    ce = ce_loss(out.logits, coarse);
  }
  Tensor total = ce.value;
  m.ce = ce.value.item();
  if (car_enabled) {
    const FlatPair flat = flatten_batch(out.features, coarse);
    const CarResult r = car_losses(std::span<const FlatPair>(&flat, 1), car);
    total = ops::add(total, r.total);
    m.intra = r.intra;
    m.c2c = r.c2c;
    m.c2p = r.c2p;
  }
  m.total = total.item();
  if (!std::isfinite(m.total)) {
    std::ostringstream os;
    os << "non-finite loss at iter " << iter << ": ce=" << m.ce << " intra=" << m.intra << " c2c=" << m.c2c
       << " c2p=" << m.c2p;
    for (const auto& p : params) {
      double mx = 0.0;
      for (double v : p.tensor->data()) mx = std::max(mx, std::abs(v));
      os << "\n  " << p.name << " max|w|=" << mx;
    }
    throw NumericError(os.str());
  }
  total.backward();
  m.lr = poly_lr(train.base_lr, iter, train.iters, train.poly_power);
  optimizer.step(params, m.lr);
  return m;
}

}  // namespace card
