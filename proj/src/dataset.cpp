#include "card/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "card/error.hpp"
#include "card/pnm.hpp"

namespace card {

void BiasSpec::validate() const {
  auto check_pair = [&](const ClassPair& p) {
    if (p.background < 0 || p.foreground < 0 || static_cast<std::size_t>(p.background) >= num_classes ||
        static_cast<std::size_t>(p.foreground) >= num_classes) {
      throw ConfigError("class pair " + std::to_string(p.background) + "-" + std::to_string(p.foreground) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (p.background == p.foreground) throw ConfigError("class pair needs two distinct classes");
  };
  if (num_classes < 2 || num_classes >= static_cast<std::size_t>(LabelField::kIgnore)) {
    throw ConfigError("num_classes must be in [2, 255)");
  }
  if (image_size == 0 || image_size % 32 != 0) throw ConfigError("image_size must be a positive multiple of 32");
  if (train_pairs.empty()) throw ConfigError("at least one train pair is required");
  for (const auto& p : train_pairs) check_pair(p);
  for (const auto& p : heldout_pairs) {
    check_pair(p);
    if (std::find(train_pairs.begin(), train_pairs.end(), p) != train_pairs.end()) {
      throw ConfigError("pair " + std::to_string(p.background) + "-" + std::to_string(p.foreground) +
                        " is both a train and a held-out pair");
    }
  }
  if (shapes.empty()) throw ConfigError("at least one shape kind is required");
  if (!(fg_fraction > 0.0 && fg_fraction <= 0.8)) throw ConfigError("fg_fraction must be in (0, 0.8]");
  if (heldout_test_fraction < 0.0 || heldout_test_fraction > 1.0) {
    throw ConfigError("heldout_test_fraction must be in [0, 1]");
  }
  if (heldout_test_fraction > 0.0 && test_images > 0 && heldout_pairs.empty()) {
    throw ConfigError("held-out test images requested but no held-out pairs given");
  }
  if (noise_std < 0 || fg_gap < 0 || texture_amp < 0) throw ConfigError("noise/gap/texture must be >= 0");
  if (train_images == 0) throw ConfigError("train_images must be positive");
}

namespace {

using Rgb = std::array<double, 3>;

struct Appearance {
  Rgb color;
  double angle;
  double period;
};

std::vector<Appearance> class_appearance(const BiasSpec& spec) {
  std::set<int> fg;
  for (const auto* list : {&spec.train_pairs, &spec.heldout_pairs})
    for (const auto& p : *list) fg.insert(p.foreground);

  static const Rgb kBackgrounds[] = {
      {0.20, 0.55, 0.25}, {0.55, 0.60, 0.85}, {0.80, 0.75, 0.35}, {0.35, 0.30, 0.55}, {0.15, 0.40, 0.55}};
  const Rgb fg_base{0.60, 0.38, 0.30};
  const Rgb fg_dir{1.0 / std::numbers::sqrt2, -1.0 / std::numbers::sqrt2, 0.0};

  std::vector<Appearance> out(spec.num_classes);
  const double m = static_cast<double>(fg.size());
  std::size_t bg_index = 0;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    auto& a = out[k];
    a.angle = static_cast<double>(k) * std::numbers::pi / 4.0;
    a.period = 5.0 + static_cast<double>(k % 3);
    const auto it = fg.find(static_cast<int>(k));
    if (it != fg.end()) {
      const double j = static_cast<double>(std::distance(fg.begin(), it));
      const double t = m > 1 ? (j - (m - 1) / 2.0) / (m - 1) : 0.0;  // in [-1/2, 1/2]
      for (int c = 0; c < 3; ++c) a.color[c] = fg_base[c] + spec.fg_gap * t * fg_dir[c];
    } else {
      a.color = kBackgrounds[bg_index++ % std::size(kBackgrounds)];
    }
  }
  return out;
}

// Foreground mask of one shape with the requested area.
std::vector<bool> rasterize(const BiasSpec& spec, ShapeKind kind, std::mt19937_64& rng) {
  const std::size_t s = spec.image_size;
  const double area = spec.fg_fraction * static_cast<double>(s * s);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<bool> mask(s * s, false);
  if (kind == ShapeKind::kRect) {
    const double aspect = 0.6 + u01(rng);
    auto w = static_cast<std::size_t>(std::clamp(std::lround(std::sqrt(area * aspect)), 1L, static_cast<long>(s)));
    auto h = static_cast<std::size_t>(std::clamp(std::lround(area / static_cast<double>(w)), 1L, static_cast<long>(s)));
    const auto x0 = static_cast<std::size_t>(u01(rng) * static_cast<double>(s - w + 1));
    const auto y0 = static_cast<std::size_t>(u01(rng) * static_cast<double>(s - h + 1));
    for (std::size_t y = y0; y < std::min(s, y0 + h); ++y)
      for (std::size_t x = x0; x < std::min(s, x0 + w); ++x) mask[y * s + x] = true;
  } else {
    const double r = std::min(std::sqrt(area / std::numbers::pi), static_cast<double>(s) / 2.0);
    const double span = static_cast<double>(s) - 2.0 * r;
    const double cx = r + u01(rng) * span;
    const double cy = r + u01(rng) * span;
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        mask[y * s + x] = dx * dx + dy * dy <= r * r;
      }
    }
  }
  return mask;
}

Sample render(const BiasSpec& spec, const std::vector<Appearance>& look, ClassPair pair, bool heldout,
              std::size_t index, std::mt19937_64& rng) {
  const std::size_t s = spec.image_size;
  const ShapeKind kind = spec.shapes[index % spec.shapes.size()];
  const std::vector<bool> mask = rasterize(spec, kind, rng);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  const double phase_bg = phase_dist(rng);
  const double phase_fg = phase_dist(rng);
  std::normal_distribution<double> noise(0.0, 1.0);

  Sample out;
  out.pair = pair;
  out.heldout = heldout;
  out.rgb.resize(s * s * 3);
  std::vector<int> labels(s * s);
  const long border = static_cast<long>(spec.ignore_border);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t p = y * s + x;
      const bool in_fg = mask[p];
      const int cls = in_fg ? pair.foreground : pair.background;
      const Appearance& a = look[static_cast<std::size_t>(cls)];
      const double coord = static_cast<double>(x) * std::cos(a.angle) + static_cast<double>(y) * std::sin(a.angle);
      const double stripe =
          spec.texture_amp * std::sin(2.0 * std::numbers::pi * coord / a.period + (in_fg ? phase_fg : phase_bg));
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = a.color[c] + stripe + spec.noise_std * noise(rng);
        out.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
      }
      labels[p] = cls;
      if (in_fg && border > 0) {
        bool edge = false;
        for (long dy = -border; dy <= border && !edge; ++dy) {
          for (long dx = -border; dx <= border && !edge; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(s) || xx >= static_cast<long>(s)) continue;
            if (!mask[static_cast<std::size_t>(yy) * s + static_cast<std::size_t>(xx)]) edge = true;
          }
        }
        if (edge) labels[p] = LabelField::kIgnore;
      }
    }
  }
  out.labels = LabelField(s, s, spec.num_classes, std::move(labels));
  return out;
}

// Pair and held-out flag of every test image, in generation order.
std::vector<std::pair<ClassPair, bool>> test_plan(const BiasSpec& spec) {
  const auto n_held = static_cast<std::size_t>(
      std::lround(spec.heldout_test_fraction * static_cast<double>(spec.test_images)));
  std::vector<std::pair<ClassPair, bool>> plan;
  for (std::size_t i = 0; i < spec.test_images; ++i) {
    if (i < n_held) {
      plan.emplace_back(spec.heldout_pairs[i % spec.heldout_pairs.size()], true);
    } else {
      plan.emplace_back(spec.train_pairs[(i - n_held) % spec.train_pairs.size()], false);
    }
  }
  return plan;
}

}  // namespace

Dataset gen_dataset(const BiasSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const auto look = class_appearance(spec);
  Dataset ds;
  ds.spec = spec;
  for (std::size_t i = 0; i < spec.train_images; ++i) {
    ds.train.push_back(render(spec, look, spec.train_pairs[i % spec.train_pairs.size()], false, i, rng));
  }
  const auto plan = test_plan(spec);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    ds.test.push_back(render(spec, look, plan[i].first, plan[i].second, i, rng));
  }
  return ds;
}

std::vector<double> expected_frequencies(const BiasSpec& spec, bool train_split) {
  std::vector<double> f(spec.num_classes, 0.0);
  std::vector<ClassPair> pairs;
  if (train_split) {
    for (std::size_t i = 0; i < spec.train_images; ++i) pairs.push_back(spec.train_pairs[i % spec.train_pairs.size()]);
  } else {
    for (const auto& [p, held] : test_plan(spec)) pairs.push_back(p);
  }
  if (pairs.empty()) return f;
  for (const auto& p : pairs) {
    f[static_cast<std::size_t>(p.background)] += 1.0 - spec.fg_fraction;
    f[static_cast<std::size_t>(p.foreground)] += spec.fg_fraction;
  }
  for (auto& v : f) v /= static_cast<double>(pairs.size());
  return f;
}

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("make_batch: empty batch");
  const std::size_t h = samples[indices[0]].labels.height, w = samples[indices[0]].labels.width;
  std::vector<double> data;
  data.reserve(indices.size() * h * w * 3);
  Batch b;
  for (auto i : indices) {
    const Sample& s = samples[i];
    if (s.labels.height != h || s.labels.width != w) throw ShapeError("make_batch: mixed image sizes");
    for (auto v : s.rgb) data.push_back(static_cast<double>(v) / 255.0);
    b.labels.push_back(s.labels);
  }
  b.images = Tensor({indices.size(), h, w, 3}, std::move(data));
  return b;
}

Batch make_batch(std::span<const Sample> samples) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(samples, idx);
}

namespace {

std::string image_stem(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

void save_split(const std::filesystem::path& dir, const std::vector<Sample>& split) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.csv");
  index << "image,background,foreground,heldout\n";
  for (std::size_t i = 0; i < split.size(); ++i) {
    const Sample& s = split[i];
    const std::string stem = image_stem(i);
    write_ppm(dir / (stem + ".ppm"), RgbImage{s.labels.width, s.labels.height, s.rgb});
    GrayImage g{s.labels.width, s.labels.height, {}};
    for (int l : s.labels.labels) g.pixels.push_back(static_cast<std::uint8_t>(l));
    write_pgm(dir / (stem + ".pgm"), g);
    index << stem << ',' << s.pair.background << ',' << s.pair.foreground << ',' << (s.heldout ? 1 : 0) << '\n';
  }
}

std::vector<Sample> load_split(const std::filesystem::path& dir, std::size_t num_classes) {
  std::ifstream index(dir / "index.csv");
  if (!index) throw ConfigError("missing " + (dir / "index.csv").string());
  std::string line;
  std::getline(index, line);
  std::vector<Sample> out;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string stem, bg, fg, held;
    std::getline(ls, stem, ',');
    std::getline(ls, bg, ',');
    std::getline(ls, fg, ',');
    std::getline(ls, held, ',');
    Sample s;
    try {
      s.pair = {std::stoi(bg), std::stoi(fg)};
    } catch (const std::exception&) {
      throw ConfigError("malformed index line '" + line + "' in " + dir.string());
    }
    s.heldout = held == "1";
    RgbImage img = read_ppm(dir / (stem + ".ppm"));
    GrayImage lab = read_pgm(dir / (stem + ".pgm"));
    if (img.width != lab.width || img.height != lab.height) throw ConfigError("image/label size mismatch for " + stem);
    s.rgb = std::move(img.pixels);
    std::vector<int> labels(lab.pixels.begin(), lab.pixels.end());
    s.labels = LabelField(lab.height, lab.width, num_classes, std::move(labels));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  save_split(dir / "train", ds.train);
  save_split(dir / "test", ds.test);
}

Dataset load_dataset(const std::filesystem::path& dir, const BiasSpec& spec) {
  Dataset ds;
  ds.spec = spec;
  ds.train = load_split(dir / "train", spec.num_classes);
  ds.test = load_split(dir / "test", spec.num_classes);
  return ds;
}

}  // namespace card
