#include "card/ejpu.hpp"

#include <cmath>

#include "card/error.hpp"
#include "card/ops.hpp"

namespace card {

void FeaturePyramid::validate() const {
  if (levels.empty()) throw ShapeError("feature pyramid is empty");
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (levels[l].rank() != 4) {
      throw ShapeError("pyramid level " + std::to_string(l) + " must be NxHxWxC, got " +
                       shape_string(levels[l].shape()));
    }
    if (l == 0) continue;
    const auto& a = levels[l - 1];
    const auto& b = levels[l];
    if (b.dim(0) != a.dim(0) || b.dim(1) != (a.dim(1) + 1) / 2 || b.dim(2) != (a.dim(2) + 1) / 2) {
      throw ShapeError("pyramid level " + std::to_string(l) + " " + shape_string(b.shape()) +
                       " is not half of " + shape_string(a.shape()));
    }
  }
}

ChannelPadding::ChannelPadding(std::size_t in, std::size_t tgt, std::mt19937_64& rng)
    : cin(in), target(tgt) {
  if (in >= tgt) throw ShapeError("channel padding needs Cin < target");
  projection = normal_weight({in, tgt - in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  std::vector<double> eye(tgt * tgt, 0.0);
  for (std::size_t i = 0; i < tgt; ++i) eye[i * tgt + i] = 1.0;
  mix = Tensor({1, 1, tgt, tgt}, std::move(eye), true);
}

Tensor ChannelPadding::forward(const Tensor& x) const {
  const bool batched = x.rank() == 4;
  const Tensor x4 = batched ? x : ops::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  const std::size_t n = x4.dim(0), h = x4.dim(1), w = x4.dim(2);
  if (x4.dim(3) != cin) {
    throw ShapeError("channel padding built for " + std::to_string(cin) + " channels, got " +
                     shape_string(x.shape()));
  }
  const std::size_t extra = target - cin;
  Tensor pooled = ops::reshape(ops::global_avg_pool(x4), {n, cin});
  Tensor projected = ops::reshape(ops::matmul(pooled, projection), {n, 1, 1, extra});
  Tensor padding = ops::broadcast_to(projected, {n, h, w, extra});
  const Tensor parts[] = {x4, padding};
  Tensor y = ops::conv2d(ops::concat(parts, 3), mix);
  return batched ? y : ops::reshape(y, {h, w, target});
}

void ChannelPadding::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".projection", &projection, true});
  out.push_back({prefix + ".mix", &mix, true});
}

Tensor cpm_pad(const Tensor& x, const ChannelPadding& cpm, std::size_t target) {
  const std::size_t cin = x.dim(x.rank() - 1);
  if (cin == target) return x;
  if (cin > target) {
    throw ShapeError("channel padding cannot reduce " + std::to_string(cin) + " channels to " +
                     std::to_string(target));
  }
  return cpm.forward(x);
}

Ejpu::Ejpu(EjpuConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
  const std::size_t levels = cfg_.level_channels.size();
  if (levels < 2) throw ConfigError("EJPU needs at least two pyramid levels");
  if (cfg_.dilations.empty() || cfg_.width == 0 || cfg_.c_out == 0) {
    throw ConfigError("EJPU width, c_out and dilations must be non-empty");
  }
  for (std::size_t c : cfg_.level_channels) {
    level_convs.emplace_back(3, c, cfg_.width, ops::Conv2dOptions{}, false, rng);
    level_bns.emplace_back(cfg_.width);
  }
  const std::size_t fused = levels * cfg_.width;
  for (std::size_t d : cfg_.dilations) {
    Separable s;
    s.depthwise = normal_weight({3, 3, 1, fused}, std::sqrt(2.0 / 9.0), rng);
    s.pointwise = he_normal(1, fused, cfg_.width, rng);
    s.bn = BatchNorm(cfg_.width);
    s.dilation = d;
    separables.push_back(std::move(s));
  }
  const std::size_t jpu_channels = cfg_.dilations.size() * cfg_.width;
  calibration.weight = normal_weight({1, 1, jpu_channels, cfg_.c_out}, cfg_.calibration_init_std, rng);
  calibration_bn = BatchNorm(cfg_.c_out, cfg_.calibration_gamma_init);
  const std::size_t top = cfg_.level_channels.back();
  if (top > cfg_.c_out) {
    throw ConfigError("top pyramid level has " + std::to_string(top) + " channels, more than c_out " +
                      std::to_string(cfg_.c_out));
  }
  if (top < cfg_.c_out) cpm.emplace(top, cfg_.c_out, rng);
}

Tensor Ejpu::jpu_branch(const FeaturePyramid& pyr, bool training) {
  pyr.validate();
  if (pyr.levels.size() != level_convs.size()) {
    throw ShapeError("EJPU built for " + std::to_string(level_convs.size()) + " levels, got " +
                     std::to_string(pyr.levels.size()));
  }
  const std::size_t h8 = pyr.levels[0].dim(1), w8 = pyr.levels[0].dim(2);
  std::vector<Tensor> fused;
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const bool top = l + 1 == pyr.levels.size();
    const Tensor in = top ? ops::stop_gradient(pyr.levels[l]) : pyr.levels[l];
    Tensor f = ops::relu(level_bns[l].forward(level_convs[l].forward(in), training));
    if (l > 0) f = ops::bilinear_resize(f, h8, w8);
    fused.push_back(f);
  }
  const Tensor stacked = ops::concat(fused, 3);
  const std::size_t channels = stacked.dim(3);
  std::vector<Tensor> branches;
  for (auto& s : separables) {
    Tensor y = ops::conv2d(stacked, s.depthwise, {.stride = 1, .dilation = s.dilation, .groups = channels});
    y = ops::conv2d(y, s.pointwise);
    branches.push_back(ops::relu(s.bn.forward(y, training)));
  }
  return ops::concat(branches, 3);
}

Tensor Ejpu::forward(const FeaturePyramid& pyr, bool training) {
  const Tensor jpu = ops::relu(calibration_bn.forward(calibration.forward(jpu_branch(pyr, training)), training));
  const Tensor& top = pyr.top();
  Tensor residual = ops::bilinear_resize(top, pyr.levels[0].dim(1), pyr.levels[0].dim(2));
  if (cpm) residual = cpm_pad(residual, *cpm, cfg_.c_out);
  else if (residual.dim(3) != cfg_.c_out) {
    throw ShapeError("EJPU residual has " + std::to_string(residual.dim(3)) + " channels, expected " +
                     std::to_string(cfg_.c_out));
  }
  return ops::add(residual, jpu);
}

void Ejpu::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t l = 0; l < level_convs.size(); ++l) {
    level_convs[l].collect(out, prefix + ".level" + std::to_string(l));
    level_bns[l].collect(out, prefix + ".level" + std::to_string(l) + ".bn");
  }
  for (std::size_t i = 0; i < separables.size(); ++i) {
    const std::string p = prefix + ".sep" + std::to_string(i);
    out.push_back({p + ".depthwise", &separables[i].depthwise, true});
    out.push_back({p + ".pointwise", &separables[i].pointwise, true});
    separables[i].bn.collect(out, p + ".bn");
  }
  calibration.collect(out, prefix + ".calibration");
  calibration_bn.collect(out, prefix + ".calibration.bn");
  if (cpm) cpm->collect(out, prefix + ".cpm");
}

}  // namespace card
