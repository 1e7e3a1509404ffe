#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "card/error.hpp"
#include "card/gradcheck.hpp"
#include "card/ops.hpp"
#include "card/saa.hpp"
#include "oracles.hpp"

using namespace card;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

SyncedAxialAttention make_saa(std::size_t c, std::size_t heads, std::uint64_t seed, bool column_first = true) {
  AttentionConfig cfg;
  cfg.d_model = c;
  cfg.heads = heads;
  cfg.column_first = column_first;
  std::mt19937_64 rng(seed);
  SyncedAxialAttention saa(cfg, rng);
  // Stronger projections than the init so attention is far from uniform.
  for (Tensor* w : {&saa.wq, &saa.wk}) *w = random_tensor(w->shape(), rng, 1.0, false);
  return saa;
}

std::vector<double> dense(const SyncedAxialAttention& s, const Tensor& x) {
  return oracle::dense_attention(vec(x), x.dim(0), x.dim(1), x.dim(2), s.config().heads, vec(s.cpe_weight),
                                 vec(s.wq), vec(s.wk), vec(s.wv), vec(s.wo));
}

// Column-then-row axial attention with shared Q/K, written with plain loops.
std::vector<double> axial(const SyncedAxialAttention& s, const Tensor& x) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2), heads = s.config().heads, d = c / heads;
  auto p = oracle::conv2d(vec(x), h, w, c, vec(s.cpe_weight), 3, c, 1, 1, c);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] += x.data()[i];
  auto project = [&](const std::vector<double>& in, const Tensor& m) {
    std::vector<double> out(h * w * c, 0.0);
    for (std::size_t i = 0; i < h * w; ++i)
      for (std::size_t o = 0; o < c; ++o)
        for (std::size_t j = 0; j < c; ++j) out[i * c + o] += in[i * c + j] * m.data()[j * c + o];
    return out;
  };
  const auto q = project(p, s.wq), k = project(p, s.wk), v = project(p, s.wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  auto score = [&](std::size_t a, std::size_t b, std::size_t hd) {
    double acc = 0.0;
    for (std::size_t t = 0; t < d; ++t) acc += q[a * c + hd * d + t] * k[b * c + hd * d + t];
    return scale * acc;
  };
  auto softmax_row = [](std::vector<double> z) {
    double mx = z[0];
    for (double e : z) mx = std::max(mx, e);
    double sum = 0.0;
    for (double& e : z) sum += (e = std::exp(e - mx));
    for (double& e : z) e /= sum;
    return z;
  };
  std::vector<double> mid(h * w * c, 0.0), out(h * w * c, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t col = 0; col < w; ++col)
      for (std::size_t r = 0; r < h; ++r) {
        std::vector<double> z(h);
        for (std::size_t r2 = 0; r2 < h; ++r2) z[r2] = score(r * w + col, r2 * w + col, hd);
        const auto a = softmax_row(z);
        for (std::size_t r2 = 0; r2 < h; ++r2)
          for (std::size_t t = 0; t < d; ++t) mid[(r * w + col) * c + hd * d + t] += a[r2] * v[(r2 * w + col) * c + hd * d + t];
      }
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col) {
        std::vector<double> z(w);
        for (std::size_t c2 = 0; c2 < w; ++c2) z[c2] = score(r * w + col, r * w + c2, hd);
        const auto a = softmax_row(z);
        for (std::size_t c2 = 0; c2 < w; ++c2)
          for (std::size_t t = 0; t < d; ++t) out[(r * w + col) * c + hd * d + t] += a[c2] * mid[(r * w + c2) * c + hd * d + t];
      }
  }
  return project(out, s.wo);
}

void expect_near_all(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(AttentionConfig, HeadsMustDivideChannels) {
  AttentionConfig c;
  c.d_model = 6;
  c.heads = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c.heads = 3;
  EXPECT_NO_THROW(c.validate());
  EXPECT_DOUBLE_EQ(c.scale(), 1.0 / std::sqrt(2.0));
}

TEST(Cpe, ZeroKernelIsIdentity) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({5, 3, 4}, rng, 1.0, false);
  const Tensor y = cpe(x, Tensor::zeros({3, 3, 1, 4}));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(vec(y), vec(x));
}

TEST(Saa, SingleRowMatchesDenseAttention) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = make_saa(8, 4, seed);
    std::mt19937_64 rng(seed + 100);
    const Tensor x = random_tensor({1, 7, 8}, rng, 1.0, false);
    expect_near_all(vec(s.forward(x)), dense(s, x), 1e-10);
  }
}

TEST(Saa, SingleColumnMatchesDenseAttention) {
  for (bool column_first : {true, false}) {
    const auto s = make_saa(8, 2, 3, column_first);
    std::mt19937_64 rng(9);
    const Tensor x = random_tensor({6, 1, 8}, rng, 1.0, false);
    expect_near_all(vec(s.forward(x)), dense(s, x), 1e-10);
  }
}

TEST(Saa, GeneralShapeMatchesLoopOracle) {
  const auto s = make_saa(8, 4, 21);
  std::mt19937_64 rng(22);
  const Tensor x = random_tensor({5, 7, 8}, rng, 1.0, false);
  expect_near_all(vec(s.forward(x)), axial(s, x), 1e-10);
}

TEST(Saa, BatchedEqualsPerImage) {
  const auto s = make_saa(8, 4, 5);
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 3, 4, 8}, rng, 1.0, false);
  const auto all = vec(s.forward(x));
  for (std::size_t b = 0; b < 2; ++b) {
    const auto one = vec(s.forward(ops::reshape(ops::slice(x, 0, b, b + 1), {3, 4, 8})));
    const std::vector<double> part(all.begin() + static_cast<long>(b * one.size()),
                                   all.begin() + static_cast<long>((b + 1) * one.size()));
    expect_near_all(part, one, 1e-14);
  }
}

TEST(Saa, AttentionRowsSumToOne) {
  const auto s = make_saa(8, 4, 7);
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({5, 7, 8}, rng, 1.0, false);
  SaaProbe probe;
  const Tensor y = s.forward(x, &probe);
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  for (const Tensor* a : {&probe.column, &probe.row}) {
    const std::size_t len = a->dim(2);
    const auto d = a->data();
    for (std::size_t r = 0; r < a->size() / len; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < len; ++j) sum += d[r * len + j];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(probe.column.shape(), (Shape{4 * 7, 5, 5}));
  EXPECT_EQ(probe.row.shape(), (Shape{4 * 5, 7, 7}));
}

TEST(Saa, ConstantInputGivesConstantOutput) {
  auto s = make_saa(8, 4, 11);
  s.cpe_weight = Tensor::zeros(s.cpe_weight.shape());
  std::vector<double> pix{0.3, -1.0, 2.0, 0.5, 0.1, 0.0, -0.7, 1.1};
  std::vector<double> data;
  for (int i = 0; i < 20; ++i) data.insert(data.end(), pix.begin(), pix.end());
  const auto y = vec(s.forward(Tensor({4, 5, 8}, data)));
  for (std::size_t i = 8; i < y.size(); ++i) EXPECT_NEAR(y[i], y[i % 8], 1e-12);
}

TEST(Saa, EquivariantUnderRowAndColumnPermutations) {
  auto s = make_saa(8, 2, 13);
  // The positional encoding sees zero padding at the borders, which
  // permutations move; equivariance is a property of the attention core.
  s.cpe_weight = Tensor::zeros(s.cpe_weight.shape());
  std::mt19937_64 rng(14);
  const std::size_t h = 4, w = 5, c = 8;
  const Tensor x = random_tensor({h, w, c}, rng, 1.0, false);
  const std::size_t rp[] = {2, 0, 3, 1};
  const std::size_t cp[] = {4, 1, 0, 3, 2};
  auto permute = [&](const Tensor& t) { return ops::index_select(ops::index_select(t, 0, rp), 1, cp); };
  expect_near_all(vec(s.forward(permute(x))), vec(permute(s.forward(x))), 1e-12);
}

TEST(Saa, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto s = make_saa(8, 4, seed);
    std::mt19937_64 rng(seed + 50);
    Tensor x = random_tensor({4, 4, 8}, rng);
    Tensor wq = random_tensor(s.wq.shape(), rng, 0.5);
    Tensor wv = random_tensor(s.wv.shape(), rng, 0.5);
    const Tensor r = random_tensor({4, 4, 8}, rng, 1.0, false);
    const auto res = check_gradients(
        [&](const auto& in) {
          auto m = s;
          m.wq = in[1];
          m.wv = in[2];
          return ops::sum_all(ops::mul(m.forward(in[0]), r));
        },
        {x, wq, wv});
    EXPECT_LT(res.max_rel_err, 1e-4);
  }
}

TEST(AttentionFlops, RatioIsAxialOverDense) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{64, 64}, {8, 8}, {5, 9}, {16, 4}}) {
    const double ratio = static_cast<double>(attention_flops(h, w, 32, AttentionVariant::kSynced)) /
                         static_cast<double>(attention_flops(h, w, 32, AttentionVariant::kDense));
    EXPECT_DOUBLE_EQ(ratio, static_cast<double>(h + w) / static_cast<double>(h * w));
  }
  EXPECT_EQ(attention_flops(64, 64, 64, AttentionVariant::kDense),
            32 * attention_flops(64, 64, 64, AttentionVariant::kSynced));
  EXPECT_EQ(attention_flops(1, 1, 8, AttentionVariant::kSynced), 2 * attention_flops(1, 1, 8, AttentionVariant::kDense));
}

TEST(AttentionFlops, InstrumentedCounterAtEightByEight) {
  const std::size_t h = 8, w = 8, c = 16;
  const auto s = make_saa(c, 4, 31);
  std::mt19937_64 rng(32);
  const Tensor x = random_tensor({h, w, c}, rng, 1.0, false);
  {
    MacCounter macs;
    s.forward(x);
    EXPECT_EQ(macs.count(), attention_flops(h, w, c, AttentionVariant::kSynced));
  }
  {
    // Dense attention core over all H*W positions, single head over C.
    const Tensor q = ops::reshape(x, {1, h * w, c});
    MacCounter macs;
    const Tensor a = ops::softmax(ops::bmm(q, q, true), 2);
    ops::bmm(a, q);
    EXPECT_EQ(macs.count(), attention_flops(h, w, c, AttentionVariant::kDense));
  }
}
