#include "card/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "card/car_losses.hpp"
#include "card/class_centers.hpp"
#include "card/ejpu.hpp"
#include "card/error.hpp"
#include "card/ops.hpp"
#include "card/saa.hpp"

namespace card {

GradCheckResult check_gradients(const ScalarFn& f, std::vector<Tensor> inputs, double h, double floor) {
  for (auto& t : inputs) {
    if (!t.node()->is_leaf) throw ShapeError("check_gradients: inputs must be leaves");
    t.zero_grad();
  }
  const Tensor out = f(inputs);
  if (out.size() != 1) throw ShapeError("check_gradients: f must return a scalar");
  out.backward();

  GradCheckResult result;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic = t.grad();
    std::vector<double> numeric(analytic.size());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      double plus, minus;
      {
        NoGradGuard ng;
        data[i] = orig + h;
        plus = f(inputs).item();
        data[i] = orig - h;
        minus = f(inputs).item();
      }
      data[i] = orig;
      numeric[i] = (plus - minus) / (2.0 * h);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
    result.per_input.push_back(rel);
    result.max_rel_err = std::max(result.max_rel_err, rel);
  }
  return result;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale, bool requires_grad) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = nd(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

namespace {

// Contracts an arbitrary output with fixed pseudo-random weights so every
// output element contributes a distinct amount to the scalar.
Tensor contract(const Tensor& y) {
  std::mt19937_64 rng(0xC0FFEEull + y.size());
  const Tensor r = random_tensor(y.shape(), rng, 1.0, false);
  return ops::sum_all(ops::mul(y, r));
}

Tensor positive_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ud(0.5, 2.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = ud(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Labels for a toy HxW field with every class present and a few ignored pixels.
LabelField toy_labels(std::size_t h, std::size_t w, std::size_t n, std::mt19937_64& rng) {
  std::vector<int> lab(h * w);
  std::uniform_int_distribution<int> ud(0, static_cast<int>(n) - 1);
  for (auto& l : lab) l = ud(rng);
  for (std::size_t k = 0; k < n; ++k) lab[k] = static_cast<int>(k);
  lab.back() = LabelField::kIgnore;
  return LabelField(h, w, n, std::move(lab));
}

struct Case {
  std::string name;
  std::function<double(std::mt19937_64&)> run;  // returns max relative error
};

double check(const ScalarFn& f, std::vector<Tensor> inputs) { return check_gradients(f, std::move(inputs)).max_rel_err; }

std::vector<Case> suite_cases() {
  std::vector<Case> cs;
  auto unary = [&cs](std::string name, std::function<Tensor(const Tensor&)> op, bool positive = false) {
    cs.push_back({name, [op, positive](std::mt19937_64& rng) {
                    Tensor x = positive ? positive_tensor({3, 4}, rng) : random_tensor({3, 4}, rng);
                    return check([op](const auto& in) { return contract(op(in[0])); }, {x});
                  }});
  };
  auto binary = [&cs](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    cs.push_back({name, [op](std::mt19937_64& rng) {
                    Tensor a = random_tensor({2, 3, 4}, rng);
                    Tensor b = random_tensor({3, 1}, rng);
                    return check([op](const auto& in) { return contract(op(in[0], in[1])); }, {a, b});
                  }});
  };
  binary("add", ops::add);
  binary("sub", ops::sub);
  binary("mul", ops::mul);
  cs.push_back({"div", [](std::mt19937_64& rng) {
                  Tensor a = random_tensor({2, 3, 4}, rng);
                  Tensor b = positive_tensor({3, 1}, rng);
                  return check([](const auto& in) { return contract(ops::div(in[0], in[1])); }, {a, b});
                }});
  unary("neg", ops::neg);
  unary("add_scalar", [](const Tensor& x) { return ops::add_scalar(x, 0.7); });
  unary("mul_scalar", [](const Tensor& x) { return ops::mul_scalar(x, -1.3); });
  unary("pow_scalar", [](const Tensor& x) { return ops::pow_scalar(x, 2.5); }, true);
  unary("square", ops::square);
  unary("exp", ops::exp);
  unary("log", ops::log, true);
  unary("abs", ops::abs);
  unary("relu", ops::relu);
  unary("hinge", [](const Tensor& x) { return ops::hinge(x, 0.2); });
  unary("sum", [](const Tensor& x) { return ops::sum(ops::reshape(x, {3, 2, 2}), {0, 2}); });
  unary("mean", [](const Tensor& x) { return ops::mean(x, {1}, true); });
  unary("sum_all", [](const Tensor& x) { return ops::mul_scalar(ops::sum_all(ops::square(x)), 1.0); });
  unary("mean_all", [](const Tensor& x) { return ops::mean_all(ops::square(x)); });
  unary("reshape", [](const Tensor& x) { return ops::reshape(x, {2, 6}); });
  unary("permute", [](const Tensor& x) { return ops::permute(ops::reshape(x, {2, 3, 2}), {2, 0, 1}); });
  unary("transpose", ops::transpose);
  unary("broadcast_to", [](const Tensor& x) { return ops::broadcast_to(ops::reshape(x, {3, 1, 4}), {3, 5, 4}); });
  cs.push_back({"matmul", [](std::mt19937_64& rng) {
                  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
                  return check([](const auto& in) { return contract(ops::matmul(in[0], in[1])); }, {a, b});
                }});
  cs.push_back({"bmm", [](std::mt19937_64& rng) {
                  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng);
                  return check([](const auto& in) { return contract(ops::bmm(in[0], in[1])); }, {a, b});
                }});
  cs.push_back({"bmm_transpose_b", [](std::mt19937_64& rng) {
                  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 5, 4}, rng);
                  return check([](const auto& in) { return contract(ops::bmm(in[0], in[1], true)); }, {a, b});
                }});
  unary("softmax", [](const Tensor& x) { return ops::softmax(x, 1); });
  unary("log_softmax", [](const Tensor& x) { return ops::log_softmax(x, 0); });
  auto conv = [&cs](std::string name, Shape xs, Shape ws, ops::Conv2dOptions opt) {
    cs.push_back({name, [xs, ws, opt](std::mt19937_64& rng) {
                    Tensor x = random_tensor(xs, rng), w = random_tensor(ws, rng, 0.5);
                    return check([opt](const auto& in) { return contract(ops::conv2d(in[0], in[1], opt)); }, {x, w});
                  }});
  };
  conv("conv2d", {2, 5, 6, 3}, {3, 3, 3, 4}, {});
  conv("conv2d_stride2", {1, 7, 6, 2}, {3, 3, 2, 3}, {.stride = 2});
  conv("conv2d_dilated", {6, 7, 2}, {3, 3, 2, 2}, {.dilation = 2});
  conv("conv2d_depthwise", {1, 5, 5, 4}, {3, 3, 1, 4}, {.groups = 4});
  conv("conv2d_1x1", {1, 3, 4, 3}, {1, 1, 3, 5}, {});
  cs.push_back({"bilinear_up", [](std::mt19937_64& rng) {
                  Tensor x = random_tensor({2, 3, 4, 2}, rng);
                  return check([](const auto& in) { return contract(ops::bilinear_resize(in[0], 7, 9)); }, {x});
                }});
  cs.push_back({"bilinear_down", [](std::mt19937_64& rng) {
                  Tensor x = random_tensor({6, 8, 2}, rng);
                  return check([](const auto& in) { return contract(ops::bilinear_resize(in[0], 3, 3)); }, {x});
                }});
  cs.push_back({"concat", [](std::mt19937_64& rng) {
                  Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng);
                  return check(
                      [](const auto& in) {
                        const Tensor parts[] = {in[0], in[1], in[0]};
                        return contract(ops::concat(parts, 1));
                      },
                      {a, b});
                }});
  unary("slice", [](const Tensor& x) { return ops::slice(x, 1, 1, 3); });
  unary("index_select", [](const Tensor& x) {
    const std::size_t idx[] = {2, 0, 2};
    return ops::index_select(x, 0, idx);
  });
  cs.push_back({"global_avg_pool", [](std::mt19937_64& rng) {
                  Tensor x = random_tensor({2, 3, 4, 3}, rng);
                  return check([](const auto& in) { return contract(ops::global_avg_pool(in[0])); }, {x});
                }});
  cs.push_back({"batch_norm", [](std::mt19937_64& rng) {
                  Tensor x = random_tensor({2, 3, 3, 4}, rng);
                  BatchNorm bn(4);
                  Tensor g = random_tensor({4}, rng, 1.0), b = random_tensor({4}, rng, 1.0);
                  return check(
                      [bn](const auto& in) mutable {
                        bn.gamma = in[1];
                        bn.beta = in[2];
                        return contract(bn.forward(in[0], true));
                      },
                      {x, g, b});
                }});

  // Regularization losses on a 6x6 toy with three classes.
  auto loss_case = [&cs](std::string name, std::function<Tensor(const FlatPair&, const CarConfig&)> loss) {
    cs.push_back({name, [loss](std::mt19937_64& rng) {
                    const LabelField lab = toy_labels(6, 6, 3, rng);
                    Tensor x = random_tensor({6, 6, 5}, rng);
                    CarConfig cfg;
                    cfg.eps0 = 0.1;
                    cfg.eps1 = 0.1;
                    return check([lab, cfg, loss](const auto& in) { return loss(flatten_pair(in[0], lab), cfg); }, {x});
                  }});
  };
  loss_case("batch_centers", [](const FlatPair& f, const CarConfig&) {
    const FlatPair pairs[] = {f};
    return contract(batch_centers(pairs).mu);
  });
  loss_case("distribute_centers", [](const FlatPair& f, const CarConfig&) {
    const FlatPair pairs[] = {f};
    return contract(distribute_centers(f.y_flat, batch_centers(pairs)));
  });
  loss_case("intra_c2p", [](const FlatPair& f, const CarConfig&) {
    const FlatPair pairs[] = {f};
    return intra_c2p_loss(f, batch_centers(pairs)).value;
  });
  loss_case("inter_c2c", [](const FlatPair& f, const CarConfig& cfg) {
    const FlatPair pairs[] = {f};
    return inter_c2c_loss(batch_centers(pairs), cfg).value;
  });
  loss_case("inter_c2p", [](const FlatPair& f, const CarConfig& cfg) {
    const FlatPair pairs[] = {f};
    return inter_c2p_loss(f, batch_centers(pairs), cfg).value;
  });
  loss_case("car_total", [](const FlatPair& f, const CarConfig& cfg) {
    const FlatPair pairs[] = {f};
    return car_losses(pairs, cfg).total;
  });

  cs.push_back({"cpe", [](std::mt19937_64& rng) {
                  Tensor x = random_tensor({1, 4, 3, 4}, rng), w = random_tensor({3, 3, 1, 4}, rng, 0.5);
                  return check([](const auto& in) { return contract(cpe(in[0], in[1])); }, {x, w});
                }});
  cs.push_back({"saa_forward", [](std::mt19937_64& rng) {
                  AttentionConfig ac;
                  ac.heads = 2;
                  ac.d_model = 4;
                  SyncedAxialAttention saa(ac, rng);
                  std::vector<Tensor> in{random_tensor({2, 3, 4, 4}, rng)};
                  for (Tensor* w : {&saa.cpe_weight, &saa.wq, &saa.wk, &saa.wv, &saa.wo}) {
                    in.push_back(random_tensor(w->shape(), rng, 0.5));
                  }
                  return check(
                      [saa](const auto& v) mutable {
                        saa.cpe_weight = v[1];
                        saa.wq = v[2];
                        saa.wk = v[3];
                        saa.wv = v[4];
                        saa.wo = v[5];
                        return contract(saa.forward(v[0]));
                      },
                      in);
                }});
  cs.push_back({"cpm_forward", [](std::mt19937_64& rng) {
                  ChannelPadding cpm(3, 5, rng);
                  Tensor x = random_tensor({2, 3, 3, 3}, rng);
                  Tensor p = random_tensor(cpm.projection.shape(), rng);
                  Tensor m = random_tensor(cpm.mix.shape(), rng, 0.5);
                  return check(
                      [cpm](const auto& v) mutable {
                        cpm.projection = v[1];
                        cpm.mix = v[2];
                        return contract(cpm.forward(v[0]));
                      },
                      {x, p, m});
                }});
  // The top level reaches the JPU branch through stop_gradient, so finite
  // differences with respect to it would disagree by construction; it is
  // held constant here.
  cs.push_back({"ejpu_forward", [](std::mt19937_64& rng) {
                  EjpuConfig ec;
                  ec.level_channels = {3, 4, 4};
                  ec.width = 2;
                  ec.c_out = 6;
                  ec.dilations = {1, 2};
                  Ejpu ejpu(ec, rng);
                  std::vector<Tensor> in{random_tensor({2, 8, 8, 3}, rng), random_tensor({2, 4, 4, 4}, rng),
                                         random_tensor({2, 2, 2, 4}, rng, 1.0, false)};
                  in.push_back(random_tensor(ejpu.calibration.weight.shape(), rng, 0.3));
                  in.push_back(random_tensor(ejpu.separables[1].pointwise.shape(), rng, 0.5));
                  in.push_back(random_tensor(ejpu.level_convs[0].weight.shape(), rng, 0.5));
                  return check(
                      [ejpu](const auto& v) mutable {
                        ejpu.calibration.weight = v[3];
                        ejpu.separables[1].pointwise = v[4];
                        ejpu.level_convs[0].weight = v[5];
                        FeaturePyramid pyr{{v[0], v[1], v[2]}};
                        return contract(ejpu.forward(pyr, true));
                      },
                      in);
                }});
  return cs;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, int seeds_per_op) {
  std::vector<GradSuiteEntry> out;
  for (const auto& c : suite_cases()) {
    GradSuiteEntry e{c.name, 0.0, seeds_per_op};
    for (int s = 0; s < seeds_per_op; ++s) {
      std::mt19937_64 rng(seed * 1000003ull + static_cast<std::uint64_t>(s));
      e.max_rel_err = std::max(e.max_rel_err, c.run(rng));
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace card
