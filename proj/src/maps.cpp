#include "card/maps.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "card/error.hpp"
#include "card/ops.hpp"
#include "card/pnm.hpp"

namespace card {

DependencyMap dependency_from_centers(const ClassCenters& centers) {
  NoGradGuard no_grad;
  DependencyMap d;
  d.num_classes = centers.num_classes();
  d.present = centers.present;
  d.matrix.assign(d.num_classes * d.num_classes, 0.0);
  const auto idx = centers.present_indices();
  if (idx.empty()) return d;
  const double c = static_cast<double>(centers.mu.dim(1));
  const Tensor mu = ops::index_select(centers.mu, 0, idx);
  const Tensor sim = ops::softmax(ops::mul_scalar(ops::matmul(mu, ops::transpose(mu)), 1.0 / std::sqrt(c)), 1);
  const std::size_t m = idx.size();
  double off = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double v = sim.data()[i * m + j];
      d.matrix[idx[i] * d.num_classes + idx[j]] = v;
      if (i != j) off += v;
    }
  }
  d.mean_off_diagonal = m > 1 ? off / static_cast<double>(m * (m - 1)) : 0.0;
  return d;
}

DependencyMap class_dependency_map(Model& model, std::span<const Sample> split, std::size_t batch_size) {
  if (split.empty()) throw ConfigError("class dependency map needs a non-empty split");
  NoGradGuard no_grad;
  std::vector<FlatPair> pairs;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    const Batch b = make_batch(split.subspan(start, end - start));
    const ModelOutput out = model.forward(b.images, false);
    std::vector<LabelField> coarse;
    for (const auto& l : b.labels) coarse.push_back(l.downsample_nearest(out.features.dim(1), out.features.dim(2)));
    pairs.push_back(flatten_batch(out.features, coarse));
  }
  return dependency_from_centers(batch_centers(pairs, false));
}

RelationMap relation_field(const Tensor& features, std::size_t row, std::size_t col) {
  if (features.rank() != 3) throw ShapeError("relation_field expects HxWxC, got " + shape_string(features.shape()));
  const std::size_t h = features.dim(0), w = features.dim(1), c = features.dim(2);
  if (row >= h || col >= w) {
    throw ConfigError("marked pixel (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const auto F = features.data();
  const double* ref = F.data() + (row * w + col) * c;
  RelationMap r;
  r.height = h;
  r.width = w;
  r.raw.resize(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    double dot = 0.0;
    for (std::size_t k = 0; k < c; ++k) dot += F[p * c + k] * ref[k];
    r.raw[p] = dot;
  }
  const auto [lo, hi] = std::minmax_element(r.raw.begin(), r.raw.end());
  const double range = *hi - *lo;
  r.normalized.resize(r.raw.size());
  for (std::size_t p = 0; p < r.raw.size(); ++p) r.normalized[p] = range > 0 ? (r.raw[p] - *lo) / range : 0.0;
  return r;
}

RelationMap pixel_relation_map(Model& model, const Sample& sample, std::size_t row, std::size_t col) {
  const std::size_t h = sample.labels.height, w = sample.labels.width;
  if (row >= h || col >= w) {
    throw ConfigError("marked pixel (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                      std::to_string(h) + "x" + std::to_string(w) + " image");
  }
  NoGradGuard no_grad;
  const Batch b = make_batch(std::span<const Sample>(&sample, 1));
  const ModelOutput out = model.forward(b.images, false);
  const std::size_t fh = out.features.dim(1), fw = out.features.dim(2), c = out.features.dim(3);
  const Tensor f = ops::reshape(out.features, {fh, fw, c});
  return relation_field(f, row * fh / h, col * fw / w);
}

void write_matrix_csv(const std::filesystem::path& path, std::span<const double> values, std::size_t rows,
                      std::size_t cols) {
  if (values.size() != rows * cols) throw ShapeError("matrix CSV size mismatch");
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  char buf[40];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", values[r * cols + c]);
      os << (c ? "," : "") << buf;
    }
    os << '\n';
  }
}

void write_heatmap_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t rows,
                       std::size_t cols, std::size_t cell) {
  if (values.size() != rows * cols || cell == 0) throw ShapeError("heatmap size mismatch");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = values.empty() ? 0.0 : *hi - *lo;
  GrayImage img{cols * cell, rows * cell, std::vector<std::uint8_t>(rows * cols * cell * cell)};
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = values[(y / cell) * cols + x / cell];
      const double t = range > 0 ? (v - *lo) / range : 0.0;
      img.pixels[y * img.width + x] = static_cast<std::uint8_t>(std::lround(t * 255.0));
    }
  }
  write_pgm(path, img);
}

}  // namespace card
