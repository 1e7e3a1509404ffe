#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "card/car_losses.hpp"
#include "card/config.hpp"
#include "card/dataset.hpp"
#include "card/maps.hpp"
#include "card/metrics.hpp"
#include "card/model.hpp"

namespace card {

struct ExperimentConfig {
  std::uint64_t seed = 1;
  BiasSpec data;
  ModelConfig model;
  TrainConfig train;
  CarConfig car;
  bool car_enabled = true;
  std::size_t eval_batch = 16;

  // Reads every recognised key (defaults for missing ones) and rejects
  // unknown keys.
  static ExperimentConfig from_config(const KeyValueConfig& kv);
  std::vector<std::pair<std::string, std::string>> entries() const;
};

std::vector<ClassPair> parse_pairs(const std::string& text);
std::string format_pairs(const std::vector<ClassPair>& pairs);

struct RunReport {
  std::vector<StepMetrics> steps;
  IouReport seen_combos;     // test images whose pair occurs in training
  IouReport heldout_combos;  // test images with held-out pairs
  DependencyMap dependency;  // over the test split
  std::size_t parameters = 0;
  std::vector<std::string> artifacts;
};

// Trains `model` on ds.train and evaluates on ds.test.
RunReport train_and_evaluate(const ExperimentConfig& cfg, const Dataset& ds, Model& model);

// losses.csv, iou.csv, dependency.csv/.pgm, run.txt; appends the paths to
// report.artifacts.
void write_run_artifacts(const std::filesystem::path& dir, const ExperimentConfig& cfg, RunReport& report);

void write_losses_csv(const std::filesystem::path& path, const std::vector<StepMetrics>& steps);
void write_iou_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, IouReport>>& reports);

std::string format_double(double v);

}  // namespace card
