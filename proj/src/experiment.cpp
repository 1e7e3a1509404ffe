#include "card/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "card/error.hpp"

namespace card {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<ClassPair> parse_pairs(const std::string& text) {
  std::vector<ClassPair> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto dash = item.find('-');
    try {
      if (dash == std::string::npos) throw std::invalid_argument("no dash");
      std::size_t p1 = 0, p2 = 0;
      const std::string a = item.substr(0, dash), b = item.substr(dash + 1);
      ClassPair p{std::stoi(a, &p1), std::stoi(b, &p2)};
      if (p1 != a.size() || p2 != b.size()) throw std::invalid_argument("trailing");
      out.push_back(p);
    } catch (const std::exception&) {
      throw ConfigError("malformed class pair '" + item + "' (expected background-foreground)");
    }
  }
  return out;
}

std::string format_pairs(const std::vector<ClassPair>& pairs) {
  std::string s;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    s += (i ? "," : "") + std::to_string(pairs[i].background) + "-" + std::to_string(pairs[i].foreground);
  }
  return s;
}

namespace {

std::vector<ShapeKind> parse_shapes(const std::string& text) {
  std::vector<ShapeKind> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item == "rect") out.push_back(ShapeKind::kRect);
    else if (item == "disc") out.push_back(ShapeKind::kDisc);
    else throw ConfigError("unknown shape kind '" + item + "' (expected rect or disc)");
  }
  return out;
}

std::string format_shapes(const std::vector<ShapeKind>& shapes) {
  std::string s;
  for (std::size_t i = 0; i < shapes.size(); ++i) s += (i ? "," : "") + std::string(shapes[i] == ShapeKind::kRect ? "rect" : "disc");
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoul(item, &pos);
      if (pos != item.size()) throw std::invalid_argument("trailing");
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("malformed integer list '" + text + "'");
    }
  }
  return out;
}

std::string on_off(bool v) { return v ? "on" : "off"; }

}  // namespace

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.seed = kv.get_u64("seed", c.seed);

  auto& d = c.data;
  d.num_classes = kv.get_size("num_classes", d.num_classes);
  d.image_size = kv.get_size("image_size", d.image_size);
  d.train_images = kv.get_size("train_images", d.train_images);
  d.test_images = kv.get_size("test_images", d.test_images);
  d.train_pairs = parse_pairs(kv.get_string("train_pairs", format_pairs(d.train_pairs)));
  d.heldout_pairs = parse_pairs(kv.get_string("heldout_pairs", format_pairs(d.heldout_pairs)));
  d.shapes = parse_shapes(kv.get_string("shapes", format_shapes(d.shapes)));
  d.fg_fraction = kv.get_double("fg_fraction", d.fg_fraction);
  d.heldout_test_fraction = kv.get_double("heldout_test_fraction", d.heldout_test_fraction);
  d.noise_std = kv.get_double("noise_std", d.noise_std);
  d.fg_gap = kv.get_double("fg_gap", d.fg_gap);
  d.texture_amp = kv.get_double("texture_amp", d.texture_amp);
  d.ignore_border = kv.get_size("ignore_border", d.ignore_border);

  auto& m = c.model;
  m.num_classes = d.num_classes;
  m.stem_channels = kv.get_size("stem_channels", m.stem_channels);
  const std::string stages = kv.get_string("stage_channels", "");
  if (!stages.empty()) m.stage_channels = parse_sizes(stages);
  m.decoder_width = kv.get_size("decoder_width", m.decoder_width);
  m.c_out = kv.get_size("c_out", m.c_out);
  m.heads = kv.get_size("heads", m.heads);
  m.upsampler = parse_upsampler(kv.get_string("upsampler", to_string(m.upsampler)));

  auto& t = c.train;
  t.iters = kv.get_size("iters", t.iters);
  t.batch_size = kv.get_size("batch_size", t.batch_size);
  t.base_lr = kv.get_double("lr", t.base_lr);
  t.momentum = kv.get_double("momentum", t.momentum);
  t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
  t.poly_power = kv.get_double("poly_power", t.poly_power);
  t.ce_full_resolution = kv.get_bool("ce_full_resolution", t.ce_full_resolution);

  auto& r = c.car;
  c.car_enabled = kv.get_bool("car", c.car_enabled);
  r.eps0 = kv.get_double("eps0", r.eps0);
  r.eps1 = kv.get_double("eps1", r.eps1);
  r.w_intra = kv.get_double("w_intra", r.w_intra);
  r.w_c2c = kv.get_double("w_c2c", r.w_c2c);
  r.w_c2p = kv.get_double("w_c2p", r.w_c2p);
  r.grad_through_centers = kv.get_bool("grad_through_centers", r.grad_through_centers);
  const std::string red = kv.get_string("car_reduction", "row_sum");
  if (red == "row_sum") r.reduction = InterReduction::kRowSumThenMean;
  else if (red == "elementwise") r.reduction = InterReduction::kElementwiseMean;
  else throw ConfigError("car_reduction must be row_sum or elementwise");
  c.eval_batch = kv.get_size("eval_batch", c.eval_batch);

  kv.reject_unused();
  d.validate();
  m.validate();
  r.validate();
  if (t.iters == 0 || t.batch_size == 0) throw ConfigError("iters and batch_size must be positive");
  if (c.eval_batch == 0) throw ConfigError("eval_batch must be positive");
  return c;
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::string stages;
  for (std::size_t i = 0; i < model.stage_channels.size(); ++i) stages += (i ? "," : "") + std::to_string(model.stage_channels[i]);
  return {
      {"seed", std::to_string(seed)},
      {"num_classes", std::to_string(data.num_classes)},
      {"image_size", std::to_string(data.image_size)},
      {"train_images", std::to_string(data.train_images)},
      {"test_images", std::to_string(data.test_images)},
      {"train_pairs", format_pairs(data.train_pairs)},
      {"heldout_pairs", format_pairs(data.heldout_pairs)},
      {"shapes", format_shapes(data.shapes)},
      {"fg_fraction", format_double(data.fg_fraction)},
      {"heldout_test_fraction", format_double(data.heldout_test_fraction)},
      {"noise_std", format_double(data.noise_std)},
      {"fg_gap", format_double(data.fg_gap)},
      {"texture_amp", format_double(data.texture_amp)},
      {"ignore_border", std::to_string(data.ignore_border)},
      {"stem_channels", std::to_string(model.stem_channels)},
      {"stage_channels", stages},
      {"decoder_width", std::to_string(model.decoder_width)},
      {"c_out", std::to_string(model.c_out)},
      {"heads", std::to_string(model.heads)},
      {"upsampler", to_string(model.upsampler)},
      {"iters", std::to_string(train.iters)},
      {"batch_size", std::to_string(train.batch_size)},
      {"lr", format_double(train.base_lr)},
      {"momentum", format_double(train.momentum)},
      {"weight_decay", format_double(train.weight_decay)},
      {"poly_power", format_double(train.poly_power)},
      {"ce_full_resolution", on_off(train.ce_full_resolution)},
      {"car", on_off(car_enabled)},
      {"eps0", format_double(car.eps0)},
      {"eps1", format_double(car.eps1)},
      {"w_intra", format_double(car.w_intra)},
      {"w_c2c", format_double(car.w_c2c)},
      {"w_c2p", format_double(car.w_c2p)},
      {"grad_through_centers", on_off(car.grad_through_centers)},
      {"car_reduction", car.reduction == InterReduction::kRowSumThenMean ? "row_sum" : "elementwise"},
      {"eval_batch", std::to_string(eval_batch)},
  };
}

RunReport train_and_evaluate(const ExperimentConfig& cfg, const Dataset& ds, Model& model) {
  RunReport report;
  report.parameters = model.parameter_count();
  Sgd sgd(cfg.train.momentum, cfg.train.weight_decay);
  std::mt19937_64 order_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 1);
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t bs = std::min(cfg.train.batch_size, ds.train.size());
  std::vector<std::size_t> picked(bs);
  for (std::size_t it = 0; it < cfg.train.iters; ++it) {
    for (auto& p : picked) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      p = order[cursor++];
    }
    const Batch batch = make_batch(ds.train, picked);
    report.steps.push_back(train_step(batch, model, cfg.car, cfg.car_enabled, sgd, it, cfg.train));
  }

  std::vector<Sample> seen, held;
  for (const auto& s : ds.test) (s.heldout ? held : seen).push_back(s);
  if (!seen.empty()) report.seen_combos = eval_miou(model, seen, cfg.eval_batch);
  if (!held.empty()) report.heldout_combos = eval_miou(model, held, cfg.eval_batch);
  if (!ds.test.empty()) report.dependency = class_dependency_map(model, ds.test, cfg.eval_batch);
  return report;
}

void write_losses_csv(const std::filesystem::path& path, const std::vector<StepMetrics>& steps) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << "iter,lr,ce,intra_c2p,inter_c2c,inter_c2p,total\n";
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    os << i << ',' << format_double(s.lr) << ',' << format_double(s.ce) << ',' << format_double(s.intra) << ','
       << format_double(s.c2c) << ',' << format_double(s.c2p) << ',' << format_double(s.total) << '\n';
  }
}

void write_iou_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, IouReport>>& reports) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << "split,class,iou\n";
  for (const auto& [name, r] : reports) {
    for (std::size_t k = 0; k < r.per_class.size(); ++k) {
      os << name << ',' << k << ',' << (r.per_class[k] ? format_double(*r.per_class[k]) : "excluded") << '\n';
    }
    os << name << ",mean," << format_double(r.miou) << '\n';
  }
}

void write_run_artifacts(const std::filesystem::path& dir, const ExperimentConfig& cfg, RunReport& report) {
  std::filesystem::create_directories(dir);
  const auto losses = dir / "losses.csv";
  const auto iou = dir / "iou.csv";
  const auto dep_csv = dir / "dependency.csv";
  const auto dep_pgm = dir / "dependency.pgm";
  const auto summary = dir / "run.txt";

  write_losses_csv(losses, report.steps);
  write_iou_csv(iou, {{"seen", report.seen_combos}, {"heldout", report.heldout_combos}});
  const std::size_t n = report.dependency.num_classes;
  if (n > 0) {
    write_matrix_csv(dep_csv, report.dependency.matrix, n, n);
    write_heatmap_pgm(dep_pgm, report.dependency.matrix, n, n, 16);
  }

  auto entries = cfg.entries();
  entries.emplace_back("parameters", std::to_string(report.parameters));
  if (!report.steps.empty()) {
    const auto& last = report.steps.back();
    entries.emplace_back("final_ce", format_double(last.ce));
    entries.emplace_back("final_intra_c2p", format_double(last.intra));
    entries.emplace_back("final_inter_c2c", format_double(last.c2c));
    entries.emplace_back("final_inter_c2p", format_double(last.c2p));
    entries.emplace_back("final_total", format_double(last.total));
  }
  entries.emplace_back("miou_seen", format_double(report.seen_combos.miou));
  entries.emplace_back("miou_heldout", format_double(report.heldout_combos.miou));
  entries.emplace_back("mean_offdiag_dependency", format_double(report.dependency.mean_off_diagonal));
  for (const auto& p : {losses, iou, dep_csv, dep_pgm, summary}) report.artifacts.push_back(p.string());
  std::string artifacts;
  for (std::size_t i = 0; i < report.artifacts.size(); ++i) {
    artifacts += (i ? "," : "") + std::filesystem::path(report.artifacts[i]).filename().string();
  }
  entries.emplace_back("artifacts", artifacts);
  std::ofstream os(summary);
  if (!os) throw ConfigError("cannot write " + summary.string());
  os << format_key_values(entries);
}

}  // namespace card
