// Command-line driver: dataset generation, training, evaluation, figure
// artifacts, FLOP accounting and the gradient self-check.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "card/checkpoint.hpp"
#include "card/error.hpp"
#include "card/experiment.hpp"
#include "card/gradcheck.hpp"
#include "card/maps.hpp"
#include "card/saa.hpp"

namespace fs = std::filesystem;
using namespace card;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericError = 3;
constexpr double kGradTolerance = 1e-4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string car;
  std::string upsampler;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool experiment_flags) {
  cmd->add_option("--config", c.config, "key = value configuration file");
  cmd->add_option("--seed", c.seed, "random seed");
  if (experiment_flags) {
    cmd->add_option("--car", c.car, "class-aware regularization")->check(CLI::IsMember({"on", "off"}));
    cmd->add_option("--upsampler", c.upsampler, "decoder upsampler")->check(CLI::IsMember({"ejpu", "dilated"}));
  }
  cmd->add_option("--out", c.out, "output directory");
}

ExperimentConfig experiment_config(const Common& c) {
  KeyValueConfig kv = c.config.empty() ? KeyValueConfig() : KeyValueConfig::load(c.config);
  if (c.seed) kv.set("seed", std::to_string(*c.seed));
  if (!c.car.empty()) kv.set("car", c.car);
  if (!c.upsampler.empty()) kv.set("upsampler", c.upsampler);
  return ExperimentConfig::from_config(kv);
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

Dataset obtain_dataset(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return gen_dataset(cfg.data, cfg.seed);
  return load_dataset(data_dir, cfg.data);
}

void write_config(const fs::path& path, const ExperimentConfig& cfg) {
  std::FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw ConfigError("cannot write " + path.string());
  const std::string text = format_key_values(cfg.entries());
  std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
}

// A trained run directory holds config.txt and model.ckpt.
ExperimentConfig run_config(const std::string& run_dir) {
  if (run_dir.empty()) throw ConfigError("--run is required");
  return ExperimentConfig::from_config(KeyValueConfig::load(fs::path(run_dir) / "config.txt"));
}

std::string reduced_fraction(std::uint64_t num, std::uint64_t den) {
  const std::uint64_t g = std::gcd(num, den);
  return std::to_string(num / g) + "/" + std::to_string(den / g);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-aware regularization toolkit"};
  app.require_subcommand(1);

  Common c;
  std::string data_dir, run_dir;
  std::size_t h = 8, w = 8, ch = 64, image = 0, row = 0, col = 0;
  int seeds_per_op = 20;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic biased dataset");
  add_common(gen, c, false);

  auto* train = app.add_subcommand("train", "train and evaluate one model");
  add_common(train, c, true);
  train->add_option("--data", data_dir, "dataset directory (generated in memory when absent)");

  auto* eval = app.add_subcommand("eval", "evaluate a trained run");
  add_common(eval, c, false);
  eval->add_option("--run", run_dir, "directory written by train")->required();
  eval->add_option("--data", data_dir, "dataset directory");

  auto* maps = app.add_subcommand("maps", "class dependency and pixel relation maps");
  add_common(maps, c, false);
  maps->add_option("--run", run_dir, "directory written by train")->required();
  maps->add_option("--data", data_dir, "dataset directory");
  maps->add_option("--image", image, "test image index");
  maps->add_option("--row", row, "marked pixel row");
  maps->add_option("--col", col, "marked pixel column");

  auto* flops = app.add_subcommand("flops", "attention-core multiply-accumulate counts");
  flops->set_help_flag("--help", "print this help message and exit");
  flops->add_option("--h", h, "height");
  flops->add_option("--w", w, "width");
  flops->add_option("--c", ch, "channels");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--seed", c.seed, "random seed");
  grad->add_option("--seeds", seeds_per_op, "random draws per op")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kConfigError;
  }

  try {
    if (*gen) {
      const ExperimentConfig cfg = experiment_config(c);
      const fs::path out = require_out(c);
      save_dataset(out, gen_dataset(cfg.data, cfg.seed));
      std::cout << "wrote dataset to " << out.string() << "\n";
    } else if (*train) {
      const ExperimentConfig cfg = experiment_config(c);
      const fs::path out = require_out(c);
      const Dataset ds = obtain_dataset(cfg, data_dir);
      Model model(cfg.model, cfg.seed);
      RunReport report = train_and_evaluate(cfg, ds, model);
      write_config(out / "config.txt", cfg);
      save_checkpoint(out / "model.ckpt", model);
      write_run_artifacts(out, cfg, report);
      std::cout << "miou_seen = " << format_double(report.seen_combos.miou) << "\n"
                << "miou_heldout = " << format_double(report.heldout_combos.miou) << "\n"
                << "mean_offdiag_dependency = " << format_double(report.dependency.mean_off_diagonal) << "\n";
    } else if (*eval || *maps) {
      const ExperimentConfig cfg = run_config(run_dir);
      const fs::path out = c.out.empty() ? fs::path(run_dir) / (*eval ? "eval" : "maps") : fs::path(c.out);
      fs::create_directories(out);
      Model model(cfg.model, cfg.seed);
      load_checkpoint(fs::path(run_dir) / "model.ckpt", model);
      const Dataset ds = obtain_dataset(cfg, data_dir);
      if (ds.test.empty()) throw ConfigError("test split is empty");
      const DependencyMap dep = class_dependency_map(model, ds.test, cfg.eval_batch);
      const std::size_t n = dep.num_classes;
      write_matrix_csv(out / "dependency.csv", dep.matrix, n, n);
      write_heatmap_pgm(out / "dependency.pgm", dep.matrix, n, n, 16);
      if (*eval) {
        std::vector<Sample> seen, held;
        for (const auto& s : ds.test) (s.heldout ? held : seen).push_back(s);
        std::vector<std::pair<std::string, IouReport>> reports;
        if (!seen.empty()) reports.emplace_back("seen", eval_miou(model, seen, cfg.eval_batch));
        if (!held.empty()) reports.emplace_back("heldout", eval_miou(model, held, cfg.eval_batch));
        write_iou_csv(out / "iou.csv", reports);
        for (const auto& [name, r] : reports) std::cout << "miou_" << name << " = " << format_double(r.miou) << "\n";
        std::cout << "mean_offdiag_dependency = " << format_double(dep.mean_off_diagonal) << "\n";
      } else {
        if (image >= ds.test.size()) throw ConfigError("--image out of range");
        const RelationMap rel = pixel_relation_map(model, ds.test[image], row, col);
        write_matrix_csv(out / "relation.csv", rel.raw, rel.height, rel.width);
        write_heatmap_pgm(out / "relation.pgm", rel.normalized, rel.height, rel.width, 8);
        std::cout << "wrote maps to " << out.string() << "\n";
      }
    } else if (*flops) {
      if (h == 0 || w == 0 || ch == 0) throw ConfigError("--h, --w and --c must be positive");
      const auto dense = attention_flops(h, w, ch, AttentionVariant::kDense);
      const auto saa = attention_flops(h, w, ch, AttentionVariant::kSynced);
      std::cout << "dense = " << dense << "\n"
                << "synced_axial = " << saa << "\n"
                << "ratio = " << reduced_fraction(saa, dense) << "\n"
                << "ratio_decimal = " << format_double(static_cast<double>(saa) / static_cast<double>(dense)) << "\n";
    } else if (*grad) {
      const auto entries = run_gradient_suite(c.seed.value_or(1), seeds_per_op);
      bool ok = true;
      std::printf("%-22s %-12s %s\n", "op", "seeds", "max_rel_err");
      for (const auto& e : entries) {
        std::printf("%-22s %-12d %.3e\n", e.name.c_str(), e.seeds, e.max_rel_err);
        ok = ok && e.max_rel_err < kGradTolerance;
      }
      if (!ok) {
        std::cerr << "gradient check above tolerance " << kGradTolerance << "\n";
        return kNumericError;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kOk;
}
