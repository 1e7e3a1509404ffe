#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "card/class_centers.hpp"
#include "card/dataset.hpp"
#include "card/model.hpp"

namespace card {

// Softmax-normalized center similarities softmax(mu mu^T / sqrt(C)) over the
// present classes; rows/columns of absent classes are zero.
struct DependencyMap {
  std::size_t num_classes = 0;
  std::vector<double> matrix;  // row-major N x N
  std::vector<bool> present;
  double mean_off_diagonal = 0.0;  // over present, off-diagonal entries

  double at(std::size_t i, std::size_t j) const { return matrix[i * num_classes + j]; }
};

DependencyMap dependency_from_centers(const ClassCenters& centers);

// Centers from ground truth over the whole split, on the mixer output
// features (the same tensor the regularizer acts on).
DependencyMap class_dependency_map(Model& model, std::span<const Sample> split, std::size_t batch_size = 16);

struct RelationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> raw;         // dot product with the marked feature
  std::vector<double> normalized;  // min-max scaled to [0, 1]
};

// features: [H x W x C]; (row, col) in feature coordinates.
RelationMap relation_field(const Tensor& features, std::size_t row, std::size_t col);

// (row, col) in image coordinates, mapped to the feature cell containing it.
RelationMap pixel_relation_map(Model& model, const Sample& sample, std::size_t row, std::size_t col);

void write_matrix_csv(const std::filesystem::path& path, std::span<const double> values, std::size_t rows,
                      std::size_t cols);
// Per-file min-max normalized grayscale, each value drawn as a cell x cell block.
void write_heatmap_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t rows,
                       std::size_t cols, std::size_t cell = 1);

}  // namespace card
