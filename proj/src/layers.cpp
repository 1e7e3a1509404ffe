#include "card/layers.hpp"

#include <cmath>
#include <numeric>

#include "card/error.hpp"

namespace card {

Tensor normal_weight(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor he_normal(std::size_t k, std::size_t cin_per_group, std::size_t cout, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(k * k * cin_per_group);
  return normal_weight({k, k, cin_per_group, cout}, std::sqrt(2.0 / fan_in), rng);
}

Conv2d::Conv2d(std::size_t k, std::size_t cin, std::size_t cout, ops::Conv2dOptions opt,
               bool with_bias, std::mt19937_64& rng)
    : weight(he_normal(k, cin / opt.groups, cout, rng)), options(opt) {
  if (with_bias) bias = Tensor::zeros({cout}, true);
}

Tensor Conv2d::forward(const Tensor& x) const {
  Tensor y = ops::conv2d(x, weight, options);
  return bias ? ops::add(y, *bias) : y;
}

void Conv2d::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight, true});
  if (bias) out.push_back({prefix + ".bias", &*bias, true});
}

BatchNorm::BatchNorm(std::size_t channels, double gamma_init)
    : gamma(Tensor::full({channels}, gamma_init, true)),
      beta(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  const std::size_t c = gamma.size();
  if (x.rank() < 2 || x.dim(x.rank() - 1) != c) {
    throw ShapeError("batch norm over " + std::to_string(c) + " channels got " +
                     shape_string(x.shape()));
  }
  if (!training) {
    std::vector<double> scale(c), shift(c);
    const auto m = running_mean.data();
    const auto v = running_var.data();
    for (std::size_t i = 0; i < c; ++i) {
      scale[i] = 1.0 / std::sqrt(v[i] + eps);
      shift[i] = -m[i] * scale[i];
    }
    Tensor y = ops::add(ops::mul(x, Tensor({c}, std::move(scale))), Tensor({c}, std::move(shift)));
    return ops::add(ops::mul(y, gamma), beta);
  }

  std::vector<std::size_t> axes(x.rank() - 1);
  std::iota(axes.begin(), axes.end(), 0);
  Tensor mu = ops::mean(x, axes, true);
  Tensor centered = ops::sub(x, mu);
  Tensor var = ops::mean(ops::square(centered), axes, true);
  Tensor y = ops::mul(centered, ops::pow_scalar(ops::add_scalar(var, eps), -0.5));

  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  const auto bm = mu.data();
  const auto bv = var.data();
  for (std::size_t i = 0; i < c; ++i) {
    rm[i] = (1.0 - momentum) * rm[i] + momentum * bm[i];
    rv[i] = (1.0 - momentum) * rv[i] + momentum * bv[i];
  }
  return ops::add(ops::mul(y, gamma), beta);
}

void BatchNorm::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", &gamma, true});
  out.push_back({prefix + ".beta", &beta, true});
  out.push_back({prefix + ".running_mean", &running_mean, false});
  out.push_back({prefix + ".running_var", &running_var, false});
}

}  // namespace card
