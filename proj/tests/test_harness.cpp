#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "card/class_centers.hpp"
#include "card/config.hpp"
#include "card/dataset.hpp"
#include "card/error.hpp"
#include "card/experiment.hpp"
#include "card/gradcheck.hpp"
#include "card/maps.hpp"
#include "card/metrics.hpp"
#include "card/pnm.hpp"
#include "oracles.hpp"

using namespace card;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("card_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

BiasSpec spec(std::size_t train = 16, std::size_t test = 16) {
  BiasSpec s;
  s.image_size = 32;
  s.train_images = train;
  s.test_images = test;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.stem_channels = 4;
  c.stage_channels = {4, 6, 8, 8};
  c.decoder_width = 2;
  c.c_out = 8;
  c.heads = 2;
  return c;
}

}  // namespace

TEST(BiasSpec, Validation) {
  EXPECT_NO_THROW(spec().validate());
  BiasSpec s = spec();
  s.image_size = 40;
  EXPECT_THROW(s.validate(), ConfigError);
  s = spec();
  s.train_pairs = {{1, 1}};
  EXPECT_THROW(s.validate(), ConfigError);
  s = spec();
  s.train_pairs = {{0, 7}};
  EXPECT_THROW(s.validate(), ConfigError);
  s = spec();
  s.heldout_pairs.clear();
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Dataset, SameSeedIsIdentical) {
  const Dataset a = gen_dataset(spec(), 7), b = gen_dataset(spec(), 7), c = gen_dataset(spec(), 8);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].rgb, b.train[i].rgb);
    EXPECT_EQ(a.train[i].labels.labels, b.train[i].labels.labels);
  }
  EXPECT_NE(a.train[0].rgb, c.train[0].rgb);
}

TEST(Dataset, TrainSplitOnlyUsesTrainPairs) {
  const BiasSpec s = spec(32, 32);
  const Dataset ds = gen_dataset(s, 1);
  EXPECT_EQ(ds.train.size(), 32u);
  for (const auto& smp : ds.train) {
    EXPECT_FALSE(smp.heldout);
    EXPECT_NE(std::find(s.train_pairs.begin(), s.train_pairs.end(), smp.pair), s.train_pairs.end());
    for (int l : smp.labels.labels) EXPECT_TRUE(l == smp.pair.background || l == smp.pair.foreground);
  }
}

TEST(Dataset, TestSplitHoldsOutRequestedFraction) {
  const BiasSpec s = spec(8, 32);
  const Dataset ds = gen_dataset(s, 2);
  std::size_t held = 0;
  for (const auto& smp : ds.test) {
    const bool in_heldout =
        std::find(s.heldout_pairs.begin(), s.heldout_pairs.end(), smp.pair) != s.heldout_pairs.end();
    EXPECT_EQ(in_heldout, smp.heldout);
    held += smp.heldout;
  }
  EXPECT_EQ(held, 16u);
}

TEST(Dataset, LabelFrequenciesMatchExpectation) {
  BiasSpec s = spec(200, 8);
  s.image_size = 64;
  const Dataset ds = gen_dataset(s, 3);
  std::vector<double> freq(s.num_classes, 0.0);
  double total = 0.0;
  for (const auto& smp : ds.train)
    for (int l : smp.labels.labels) {
      if (l == LabelField::kIgnore) continue;
      freq[static_cast<std::size_t>(l)] += 1.0;
      total += 1.0;
    }
  const auto expected = expected_frequencies(s, true);
  for (std::size_t k = 0; k < s.num_classes; ++k) EXPECT_NEAR(freq[k] / total, expected[k], 0.05) << k;
}

TEST(Dataset, IgnoreBorderMarksPixels) {
  BiasSpec s = spec(4, 4);
  s.ignore_border = 1;
  const Dataset ds = gen_dataset(s, 4);
  std::size_t ignored = 0;
  for (int l : ds.train[0].labels.labels) ignored += l == LabelField::kIgnore;
  EXPECT_GT(ignored, 0u);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const fs::path dir = temp_dir("dataset");
  const Dataset a = gen_dataset(spec(4, 4), 5);
  save_dataset(dir, a);
  const Dataset b = load_dataset(dir, a.spec);
  ASSERT_EQ(b.train.size(), a.train.size());
  ASSERT_EQ(b.test.size(), a.test.size());
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    EXPECT_EQ(a.test[i].rgb, b.test[i].rgb);
    EXPECT_EQ(a.test[i].labels.labels, b.test[i].labels.labels);
    EXPECT_EQ(a.test[i].pair, b.test[i].pair);
    EXPECT_EQ(a.test[i].heldout, b.test[i].heldout);
  }
  EXPECT_THROW(load_dataset(dir / "nowhere", a.spec), ConfigError);
}

TEST(Dataset, MakeBatchScalesToUnitRange) {
  const Dataset ds = gen_dataset(spec(4, 4), 6);
  const std::size_t idx[] = {2, 0};
  const Batch b = make_batch(ds.train, idx);
  EXPECT_EQ(b.images.shape(), (Shape{2, 32, 32, 3}));
  EXPECT_DOUBLE_EQ(b.images.data()[0], ds.train[2].rgb[0] / 255.0);
  EXPECT_EQ(b.labels[1].labels, ds.train[0].labels.labels);
}

TEST(Pnm, RoundTrip) {
  const fs::path dir = temp_dir("pnm");
  RgbImage rgb{3, 2, {}};
  for (int i = 0; i < 18; ++i) rgb.pixels.push_back(static_cast<std::uint8_t>(i * 13));
  write_ppm(dir / "a.ppm", rgb);
  const RgbImage r = read_ppm(dir / "a.ppm");
  EXPECT_EQ(r.width, 3u);
  EXPECT_EQ(r.height, 2u);
  EXPECT_EQ(r.pixels, rgb.pixels);
  GrayImage g{2, 2, {0, 255, 7, 9}};
  write_pgm(dir / "a.pgm", g);
  EXPECT_EQ(read_pgm(dir / "a.pgm").pixels, g.pixels);
  EXPECT_THROW(read_ppm(dir / "a.pgm"), ConfigError);
}

TEST(Pnm, HeaderCommentsAreSkipped) {
  const fs::path dir = temp_dir("pnm_comment");
  {
    std::ofstream os(dir / "c.pgm", std::ios::binary);
    os << "P5\n# made by hand\n2 1\n255\n";
    os.put(static_cast<char>(4));
    os.put(static_cast<char>(200));
  }
  const GrayImage g = read_pgm(dir / "c.pgm");
  EXPECT_EQ(g.pixels, (std::vector<std::uint8_t>{4, 200}));
}

TEST(Metrics, PerfectPredictionScoresOne) {
  const LabelField gt(2, 3, 3, {0, 1, 2, 2, 1, 255});
  ConfusionMatrix cm(3);
  cm.add(LabelField(2, 3, 3, {0, 1, 2, 2, 1, 0}), gt);
  EXPECT_DOUBLE_EQ(iou_report(cm, 1).miou, 1.0);
}

TEST(Metrics, ComplementScoresZero) {
  const LabelField gt(1, 4, 2, {0, 0, 1, 1});
  ConfusionMatrix cm(2);
  cm.add(LabelField(1, 4, 2, {1, 1, 0, 0}), gt);
  EXPECT_DOUBLE_EQ(iou_report(cm, 1).miou, 0.0);
}

TEST(Metrics, MatchesCountingOracle) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> cls(0, 3);
  const std::size_t n = 4;
  ConfusionMatrix cm(n);
  std::vector<double> tp(n, 0), fp(n, 0), fn(n, 0);
  for (int img = 0; img < 3; ++img) {
    std::vector<int> g(30), p(30);
    for (std::size_t i = 0; i < 30; ++i) {
      g[i] = i % 7 == 0 ? 255 : cls(rng) % 3;  // class 3 never in ground truth
      p[i] = cls(rng);
      if (g[i] == 255) continue;
      if (g[i] == p[i]) {
        tp[g[i]] += 1;
      } else {
        fn[g[i]] += 1;
        fp[p[i]] += 1;
      }
    }
    cm.add(LabelField(5, 6, n, p), LabelField(5, 6, n, g));
  }
  double sum = 0.0, present = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double denom = tp[k] + fp[k] + fn[k];
    if (denom == 0) continue;
    ASSERT_TRUE(cm.iou(k).has_value());
    EXPECT_DOUBLE_EQ(*cm.iou(k), tp[k] / denom);
    sum += tp[k] / denom;
    present += 1;
  }
  EXPECT_NEAR(iou_report(cm, 3).miou, sum / present, 1e-15);
}

TEST(Metrics, AbsentClassIsExcluded) {
  ConfusionMatrix cm(3);
  cm.add(LabelField(1, 2, 3, {0, 1}), LabelField(1, 2, 3, {0, 1}));
  EXPECT_FALSE(cm.iou(2).has_value());
  EXPECT_DOUBLE_EQ(iou_report(cm, 1).miou, 1.0);
}

TEST(Metrics, EmptySplitIsAnError) {
  Model m(tiny_model(), 1);
  EXPECT_THROW(eval_miou(m, std::span<const Sample>{}), ConfigError);
  EXPECT_THROW(class_dependency_map(m, std::span<const Sample>{}), ConfigError);
}

TEST(DependencyMap, RowsSumToOneAndIdenticalCentersAreUniform) {
  ClassCenters c;
  c.mu = Tensor({3, 2}, {1, 2, 1, 2, 1, 2});
  c.present = {true, true, true};
  c.counts = {1, 1, 1};
  const DependencyMap d = dependency_from_centers(c);
  for (std::size_t i = 0; i < 3; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      row += d.at(i, j);
      EXPECT_NEAR(d.at(i, j), 1.0 / 3.0, 1e-15);
    }
    EXPECT_NEAR(row, 1.0, 1e-15);
  }
  EXPECT_NEAR(d.mean_off_diagonal, 1.0 / 3.0, 1e-15);
}

TEST(DependencyMap, MatchesSoftmaxOfScaledSimilarity) {
  std::mt19937_64 rng(6);
  ClassCenters c;
  c.mu = random_tensor({4, 5}, rng, 1.0, false);
  c.present = {true, false, true, true};
  c.counts = {3, 0, 2, 5};
  std::vector<double> mu(c.mu.data().begin(), c.mu.data().end());
  for (std::size_t k = 0; k < 5; ++k) mu[5 + k] = 0.0;
  c.mu = Tensor({4, 5}, mu);
  const DependencyMap d = dependency_from_centers(c);
  const std::size_t present[] = {0, 2, 3};
  double off = 0.0;
  for (std::size_t i : present) {
    double z[3], mx = -1e300, sum = 0.0;
    for (int a = 0; a < 3; ++a) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 5; ++k) dot += mu[i * 5 + k] * mu[present[a] * 5 + k];
      z[a] = dot / std::sqrt(5.0);
      mx = std::max(mx, z[a]);
    }
    for (double& v : z) sum += (v = std::exp(v - mx));
    for (int a = 0; a < 3; ++a) {
      EXPECT_NEAR(d.at(i, present[a]), z[a] / sum, 1e-14);
      if (present[a] != i) off += z[a] / sum;
    }
    EXPECT_EQ(d.at(i, 1), 0.0);
    EXPECT_EQ(d.at(1, i), 0.0);
  }
  EXPECT_NEAR(d.mean_off_diagonal, off / 6.0, 1e-14);
}

TEST(RelationMap, MatchesDotProductLoop) {
  std::mt19937_64 rng(7);
  const std::size_t h = 3, w = 4, c = 5;
  const Tensor f = random_tensor({h, w, c}, rng, 1.0, false);
  const RelationMap r = relation_field(f, 1, 2);
  ASSERT_EQ(r.raw.size(), h * w);
  double lo = 1e300, hi = -1e300;
  for (std::size_t p = 0; p < h * w; ++p) {
    double dot = 0.0;
    for (std::size_t k = 0; k < c; ++k) dot += f.data()[p * c + k] * f.data()[(1 * w + 2) * c + k];
    EXPECT_NEAR(r.raw[p], dot, 1e-14);
    lo = std::min(lo, dot);
    hi = std::max(hi, dot);
  }
  for (std::size_t p = 0; p < h * w; ++p) EXPECT_NEAR(r.normalized[p], (r.raw[p] - lo) / (hi - lo), 1e-14);
  EXPECT_THROW(relation_field(f, 3, 0), ConfigError);
}

TEST(RelationMap, PixelOutsideImageIsAnError) {
  Model m(tiny_model(), 1);
  const Dataset ds = gen_dataset(spec(2, 2), 1);
  EXPECT_NO_THROW(pixel_relation_map(m, ds.test[0], 31, 31));
  EXPECT_THROW(pixel_relation_map(m, ds.test[0], 32, 0), ConfigError);
}

TEST(MatrixCsv, WritesRows) {
  const fs::path dir = temp_dir("csv");
  const std::vector<double> v{0.5, 1, 2, 0.25};
  write_matrix_csv(dir / "m.csv", v, 2, 2);
  EXPECT_EQ(slurp(dir / "m.csv"), "0.5,1\n2,0.25\n");
  EXPECT_THROW(write_matrix_csv(dir / "m.csv", v, 3, 2), ShapeError);
  write_heatmap_pgm(dir / "m.pgm", v, 2, 2, 3);
  const GrayImage g = read_pgm(dir / "m.pgm");
  EXPECT_EQ(g.width, 6u);
  EXPECT_EQ(g.pixels[0], 36u);
  EXPECT_EQ(g.pixels[6 * 3], 255u);
  EXPECT_EQ(g.pixels[6 * 3 + 3], 0u);
}

TEST(KeyValueConfig, ParsesCommentsAndTypes) {
  const auto c = KeyValueConfig::parse("# hdr\nseed = 12\n\nlr=0.5 # tail\ncar = off\nname = x y\n");
  EXPECT_EQ(c.get_u64("seed", 0), 12u);
  EXPECT_DOUBLE_EQ(c.get_double("lr", 0), 0.5);
  EXPECT_FALSE(c.get_bool("car", true));
  EXPECT_EQ(c.get_string("name", ""), "x y");
  EXPECT_EQ(c.get_size("missing", 4), 4u);
  EXPECT_NO_THROW(c.reject_unused());
}

TEST(KeyValueConfig, Errors) {
  EXPECT_THROW(KeyValueConfig::parse("no equals here"), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse("a = 1\na = 2"), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse(" = 1"), ConfigError);
  const auto c = KeyValueConfig::parse("n = -3\nx = 1.5abc\nb = maybe\nextra = 1");
  EXPECT_THROW(c.get_size("n", 0), ConfigError);
  EXPECT_THROW(c.get_double("x", 0), ConfigError);
  EXPECT_THROW(c.get_bool("b", false), ConfigError);
  EXPECT_THROW(c.reject_unused(), ConfigError);
  EXPECT_THROW(KeyValueConfig::load("/nonexistent/card.cfg"), ConfigError);
}

TEST(ExperimentConfig, RoundTripsThroughText) {
  auto kv = KeyValueConfig::parse("seed = 9\ntrain_pairs = 0-1,2-3\nheldout_pairs = 0-3\ncar = off\neps0 = 0.25\n"
                                  "stage_channels = 8,8,16,16\nc_out = 16\niters = 7\n");
  const ExperimentConfig a = ExperimentConfig::from_config(kv);
  EXPECT_EQ(a.seed, 9u);
  EXPECT_FALSE(a.car_enabled);
  EXPECT_EQ(a.data.train_pairs, (std::vector<ClassPair>{{0, 1}, {2, 3}}));
  EXPECT_EQ(a.model.stage_channels, (std::vector<std::size_t>{8, 8, 16, 16}));
  EXPECT_EQ(a.train.iters, 7u);
  auto again = KeyValueConfig::parse(format_key_values(a.entries()));
  const ExperimentConfig b = ExperimentConfig::from_config(again);
  EXPECT_EQ(a.entries(), b.entries());
}

TEST(ExperimentConfig, RejectsUnknownAndMalformed) {
  auto unknown = KeyValueConfig::parse("sed = 1\n");
  EXPECT_THROW(ExperimentConfig::from_config(unknown), ConfigError);
  auto bad_pair = KeyValueConfig::parse("train_pairs = 0_1\n");
  EXPECT_THROW(ExperimentConfig::from_config(bad_pair), ConfigError);
  auto bad_eps = KeyValueConfig::parse("eps0 = -1\n");
  EXPECT_THROW(ExperimentConfig::from_config(bad_eps), ConfigError);
  EXPECT_EQ(format_pairs(parse_pairs("0-2, 1-3")), "0-2,1-3");
}

TEST(Experiment, ShortRunWritesArtifacts) {
  ExperimentConfig cfg;
  cfg.data = spec(4, 4);
  cfg.model = tiny_model();
  cfg.train.iters = 2;
  cfg.train.batch_size = 2;
  const Dataset ds = gen_dataset(cfg.data, cfg.seed);
  Model m(cfg.model, cfg.seed);
  RunReport r = train_and_evaluate(cfg, ds, m);
  EXPECT_EQ(r.steps.size(), 2u);
  const fs::path dir = temp_dir("run");
  write_run_artifacts(dir, cfg, r);
  for (const char* f : {"losses.csv", "iou.csv", "dependency.csv", "dependency.pgm", "run.txt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const std::string losses = slurp(dir / "losses.csv");
  EXPECT_EQ(losses.substr(0, losses.find('\n')), "iter,lr,ce,intra_c2p,inter_c2c,inter_c2p,total");
}
