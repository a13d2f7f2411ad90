#include "sfanet/cli.hpp"

#include <CLI11.hpp>

#include <array>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sfanet/gradcheck.hpp"
#include "sfanet/model.hpp"
#include "sfanet/run_config.hpp"
#include "sfanet/scene.hpp"
#include "sfanet/train.hpp"
#include "sfanet/weights_io.hpp"

namespace fs = std::filesystem;

namespace sfanet {
namespace {

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  int64_t index = 0;
  std::string image, mask;
};

struct Manifest {
  int64_t classes = 0, height = 0, width = 0;
  std::array<double, 3> mean = {0, 0, 0};
  std::vector<ManifestEntry> train, val;
};

std::string manifest_path(const std::string& data_dir) {
  return (fs::path(data_dir) / "manifest.txt").string();
}

void write_manifest(const std::string& data_dir, const Manifest& m) {
  std::ofstream out(manifest_path(data_dir), std::ios::trunc);
  SFA_CHECK(out.good()) << "cannot write " << manifest_path(data_dir);
  out << "# dataset manifest\n";
  out << "classes = " << m.classes << "\n";
  out << "height = " << m.height << "\n";
  out << "width = " << m.width << "\n";
  char buf[64];
  const char* names[3] = {"mean_r", "mean_g", "mean_b"};
  for (int c = 0; c < 3; ++c) {
    std::snprintf(buf, sizeof buf, "%s = %.12f", names[c], m.mean[static_cast<size_t>(c)]);
    out << buf << "\n";
  }
  out << "train_count = " << m.train.size() << "\n";
  out << "val_count = " << m.val.size() << "\n";
  for (const auto& e : m.train) out << "train " << e.index << " " << e.image << " " << e.mask << "\n";
  for (const auto& e : m.val) out << "val " << e.index << " " << e.image << " " << e.mask << "\n";
  out.flush();
  SFA_CHECK(out.good()) << "write failed for " << manifest_path(data_dir);
}

Manifest read_manifest(const std::string& data_dir) {
  const std::string path = manifest_path(data_dir);
  std::ifstream in(path);
  SFA_CHECK(in.good()) << "no dataset manifest at " << path << " (run gen-data first)";
  Manifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string head;
    ss >> head;
    if (head == "train" || head == "val") {
      ManifestEntry e;
      ss >> e.index >> e.image >> e.mask;
      SFA_CHECK(!ss.fail()) << path << ": malformed split line '" << line << "'";
      (head == "train" ? m.train : m.val).push_back(std::move(e));
      continue;
    }
    std::string eq, value;
    ss >> eq >> value;
    SFA_CHECK(eq == "=" && !value.empty()) << path << ": malformed line '" << line << "'";
    if (head == "classes") m.classes = std::stoll(value);
    else if (head == "height") m.height = std::stoll(value);
    else if (head == "width") m.width = std::stoll(value);
    else if (head == "mean_r") m.mean[0] = std::stod(value);
    else if (head == "mean_g") m.mean[1] = std::stod(value);
    else if (head == "mean_b") m.mean[2] = std::stod(value);
    else if (head == "train_count" || head == "val_count") { /* redundant with lines */ }
    else SFA_CHECK(false) << path << ": unknown manifest key '" << head << "'";
  }
  SFA_CHECK(m.classes > 0 && m.height > 0 && m.width > 0) << path << ": incomplete header";
  return m;
}

SampleSet load_split(const std::string& data_dir, const std::vector<ManifestEntry>& entries) {
  SampleSet out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    ImageU8 img = read_ppm((fs::path(data_dir) / e.image).string());
    LabelMap lab = read_pgm((fs::path(data_dir) / e.mask).string());
    SFA_CHECK(img.h == lab.h && img.w == lab.w)
        << e.image << " and " << e.mask << " have mismatched extents";
    out.push_back({image_to_tensor<float>(img), std::move(lab)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config plumbing shared by model-building commands
// ---------------------------------------------------------------------------

SceneSpec scene_spec_from(const RunConfig& cfg) {
  SceneSpec s;
  s.height = cfg.data_height;
  s.width = cfg.data_width;
  s.num_classes = static_cast<int>(cfg.model_classes);
  s.min_scale = cfg.data_scale_min;
  s.max_scale = cfg.data_scale_max;
  s.shapes_per_image = static_cast<int>(cfg.data_shapes);
  s.noise = cfg.data_noise;
  s.seed = cfg.data_seed;
  return s;
}

SfanetConfig model_config_from(const RunConfig& cfg) {
  SfanetConfig mc;
  mc.num_classes = cfg.model_classes;
  mc.width = cfg.model_width;
  mc.lambda = {cfg.model_lambda1, cfg.model_lambda2, cfg.model_lambda3, cfg.model_lambda4};
  return mc;
}

std::array<float, 3> resolve_mean(const RunConfig& cfg, const std::array<double, 3>& fallback) {
  if (cfg.data_mean_r >= 0 && cfg.data_mean_g >= 0 && cfg.data_mean_b >= 0)
    return {static_cast<float>(cfg.data_mean_r), static_cast<float>(cfg.data_mean_g),
            static_cast<float>(cfg.data_mean_b)};
  return {static_cast<float>(fallback[0]), static_cast<float>(fallback[1]),
          static_cast<float>(fallback[2])};
}

// Checkpoints carry the model tensors plus optimizer velocities and run
// metadata, so a resumed run continues the schedule where it stopped.
WeightsMap checkpoint_map(Sfanet<float>& model, const SgdOptimizer<float>& opt, int64_t iter,
                          const std::array<float, 3>& mean) {
  WeightsMap map = model_weights(model);
  for (size_t i = 0; i < opt.params().size(); ++i) {
    const auto& v = opt.velocities()[i];
    map.emplace_back("opt." + opt.params()[i].name + ".velocity",
                     TensorBlob::of(v.shape(), v.vec()));
  }
  map.emplace_back("meta.iter", TensorBlob::scalar(static_cast<double>(iter)));
  map.emplace_back("meta.classes",
                   TensorBlob::scalar(static_cast<double>(model.config().num_classes)));
  map.emplace_back("meta.width", TensorBlob::scalar(model.config().width));
  map.emplace_back("meta.mean_r", TensorBlob::scalar(mean[0]));
  map.emplace_back("meta.mean_g", TensorBlob::scalar(mean[1]));
  map.emplace_back("meta.mean_b", TensorBlob::scalar(mean[2]));
  return map;
}

double meta_scalar(const WeightsMap& map, const std::string& name, double fallback) {
  const TensorBlob* b = find_weight(map, name);
  if (!b) return fallback;
  return b->tag == DtypeTag::kF64 ? b->f64.at(0) : static_cast<double>(b->f32.at(0));
}

void check_class_count(const WeightsMap& map, const RunConfig& cfg) {
  const double wc = meta_scalar(map, "meta.classes", -1);
  if (wc >= 0)
    SFA_CHECK(static_cast<int64_t>(wc) == cfg.model_classes)
        << "class-count mismatch: weights were trained for " << static_cast<int64_t>(wc)
        << " classes, config says " << cfg.model_classes;
}

std::array<float, 3> mean_from_weights(const WeightsMap& map, const RunConfig& cfg) {
  const std::array<double, 3> stored = {meta_scalar(map, "meta.mean_r", 0),
                                        meta_scalar(map, "meta.mean_g", 0),
                                        meta_scalar(map, "meta.mean_b", 0)};
  return resolve_mean(cfg, stored);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, bool force) {
  SceneSpec spec = scene_spec_from(cfg);
  spec.validate();
  SFA_CHECK(cfg.data_train_count > 0) << "data.train_count must be positive";
  SFA_CHECK(cfg.data_val_count >= 0) << "data.val_count must be non-negative";

  const fs::path dir(cfg.paths_data_dir);
  if (fs::exists(manifest_path(cfg.paths_data_dir)) && !force)
    throw Error("dataset already exists at " + dir.string() + " (use --force to overwrite)");
  fs::create_directories(dir);

  Manifest m;
  m.classes = cfg.model_classes;
  m.height = spec.height;
  m.width = spec.width;
  m.mean = dataset_mean(spec, 0, cfg.data_train_count);

  char name[64];
  auto emit = [&](const char* split, int64_t index, std::vector<ManifestEntry>& list) {
    auto [img, lab] = generate_scene(spec, index);
    std::snprintf(name, sizeof name, "%s_%06" PRId64 ".ppm", split, index);
    const std::string image_name = name;
    std::snprintf(name, sizeof name, "%s_%06" PRId64 ".pgm", split, index);
    const std::string mask_name = name;
    write_ppm((dir / image_name).string(), img);
    write_pgm((dir / mask_name).string(), lab);
    list.push_back({index, image_name, mask_name});
  };
  // Split indices are disjoint ranges: train [0, n), val [n, n + m).
  for (int64_t i = 0; i < cfg.data_train_count; ++i) emit("train", i, m.train);
  for (int64_t i = 0; i < cfg.data_val_count; ++i) emit("val", cfg.data_train_count + i, m.val);
  write_manifest(cfg.paths_data_dir, m);

  std::printf("wrote %" PRId64 " image/mask pairs to %s (train %" PRId64 ", val %" PRId64 ")\n",
              cfg.data_train_count + cfg.data_val_count, dir.string().c_str(),
              cfg.data_train_count, cfg.data_val_count);
  std::printf("mean %.6f %.6f %.6f\n", m.mean[0], m.mean[1], m.mean[2]);
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, const std::string& resume_path) {
  const Manifest manifest = read_manifest(cfg.paths_data_dir);
  SFA_CHECK(manifest.classes == cfg.model_classes)
      << "config/model mismatch: dataset has " << manifest.classes << " classes, config says "
      << cfg.model_classes;

  const int64_t crop_h = cfg.train_crop_h > 0 ? cfg.train_crop_h : cfg.model_in_h;
  const int64_t crop_w = cfg.train_crop_w > 0 ? cfg.train_crop_w : cfg.model_in_w;
  SFA_CHECK(crop_h % 32 == 0 && crop_w % 32 == 0)
      << "train crop " << crop_h << "x" << crop_w << " must be divisible by 32";

  Sfanet<float> model = Sfanet<float>::make(model_config_from(cfg), cfg.train_seed);
  ParamList<float> params;
  model.collect(&params, nullptr, nullptr);
  SgdOptimizer<float> opt(params, cfg.train_momentum, cfg.train_weight_decay);

  const std::array<float, 3> mean = resolve_mean(cfg, manifest.mean);

  TrainConfig tc;
  tc.schedule = {cfg.train_base_lr, cfg.train_total_iters, 0.9, 0};
  tc.batch_size = cfg.train_batch_size;
  tc.ohem.theta = cfg.train_ohem_theta;
  tc.ohem.min_kept = cfg.train_ohem_min_kept > 0
                         ? cfg.train_ohem_min_kept
                         : cfg.train_batch_size * crop_h * crop_w / 16;
  tc.aug.flip_prob = cfg.train_flip_prob;
  tc.aug.scale_min = cfg.train_scale_min;
  tc.aug.scale_max = cfg.train_scale_max;
  tc.aug.crop_h = crop_h;
  tc.aug.crop_w = crop_w;
  tc.aug.mean = mean;
  tc.seed = cfg.train_seed;
  tc.val_every = cfg.train_val_every;

  if (!resume_path.empty()) {
    const WeightsMap map = load_weights(resume_path);
    check_class_count(map, cfg);
    load_model_weights(model, map);
    for (size_t i = 0; i < opt.params().size(); ++i) {
      const std::string vname = "opt." + opt.params()[i].name + ".velocity";
      const TensorBlob* blob = find_weight(map, vname);
      SFA_CHECK(blob != nullptr) << resume_path << " has no optimizer record " << vname;
      SFA_CHECK(blob->shape == opt.velocities()[i].shape()) << vname << ": shape mismatch";
      opt.velocities()[i].vec() = blob->f32;
    }
    tc.start_iter = static_cast<int64_t>(meta_scalar(map, "meta.iter", 0));
    SFA_CHECK(tc.start_iter < cfg.train_total_iters)
        << "checkpoint is already at iter " << tc.start_iter << " of " << cfg.train_total_iters;
  }

  const fs::path ckpt_dir(cfg.paths_checkpoint_dir);
  fs::create_directories(ckpt_dir);
  const std::string log_path = (ckpt_dir / "metrics.log").string();
  std::ofstream log(log_path, tc.start_iter > 0 ? std::ios::app : std::ios::trunc);
  SFA_CHECK(log.good()) << "cannot open " << log_path;

  // Run header: every effective setting, one commented key = value per line.
  {
    std::istringstream hdr(render_config(cfg));
    std::string line;
    while (std::getline(hdr, line)) log << "# " << line << "\n";
    log << "# resume_iter = " << tc.start_iter << "\n";
  }

  SampleSet train_data = load_split(cfg.paths_data_dir, manifest.train);
  SampleSet val_data = load_split(cfg.paths_data_dir, manifest.val);

  TrainHooks hooks;
  const int64_t echo_every = std::max<int64_t>(1, cfg.train_log_every);
  hooks.log_line = [&](const std::string& line) {
    log << line << "\n";
    if (line.rfind("val ", 0) == 0) {
      std::printf("%s\n", line.c_str());
      return;
    }
    std::istringstream ss(line);
    std::string tag, iter_kv;
    ss >> tag >> iter_kv;
    const int64_t it = std::stoll(iter_kv.substr(iter_kv.find('=') + 1));
    if (it % echo_every == 0 || it + 1 == cfg.train_total_iters) std::printf("%s\n", line.c_str());
  };
  hooks.checkpoint = [&](int64_t iter) {
    char name[64];
    std::snprintf(name, sizeof name, "ckpt_%06" PRId64 ".sfaw", iter);
    save_weights((ckpt_dir / name).string(), checkpoint_map(model, opt, iter, mean));
  };

  train_loop(model, opt, train_data, val_data, tc, hooks);
  log.flush();

  if (!val_data.empty()) {
    const double miou = evaluate_miou(model, val_data, mean);
    std::printf("final val miou %.6f\n", miou);
  }
  std::printf("metrics log: %s\n", log_path.c_str());
  std::printf("checkpoints in %s\n", ckpt_dir.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const RunConfig& cfg, const std::string& weights_path, const std::string& split) {
  SFA_CHECK(split == "train" || split == "val") << "unknown split '" << split << "'";
  const WeightsMap map = load_weights(weights_path);
  check_class_count(map, cfg);

  Sfanet<float> model = Sfanet<float>::make(model_config_from(cfg), 1);
  load_model_weights(model, map);
  model.set_mode(Mode::kInfer);
  model.fold_batch_norm();
  const std::array<float, 3> mean = mean_from_weights(map, cfg);

  const Manifest manifest = read_manifest(cfg.paths_data_dir);
  const auto& entries = split == "train" ? manifest.train : manifest.val;
  SFA_CHECK(!entries.empty()) << "split '" << split << "' is empty";
  SampleSet data = load_split(cfg.paths_data_dir, entries);

  ConfusionMatrix cm(static_cast<int>(cfg.model_classes));
  {
    NoGradGuard ng;
    for (const Sample& s : data) {
      TensorF x = s.image.clone();
      subtract_mean(x, mean);
      TensorF batch = Tensor<float>::zeros({1, 3, x.dim(1), x.dim(2)});
      std::copy(x.data(), x.data() + x.numel(), batch.data());
      LabelBatch pred = argmax_labels(model.forward(batch).principal);
      cm.add(s.labels.labels.data(), pred.labels.data(), pred.numel());
    }
  }
  std::printf("evaluated %zu images from split '%s'\n", data.size(), split.c_str());
  const std::vector<double> iou = cm.per_class_iou();
  for (size_t c = 0; c < iou.size(); ++c) {
    if (std::isnan(iou[c]))
      std::printf("class %zu iou absent\n", c);
    else
      std::printf("class %zu iou %.6f\n", c, iou[c]);
  }
  std::printf("miou %.6f\n", cm.miou());
  return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int cmd_infer(const RunConfig& cfg, const std::string& weights_path, const std::string& input,
              const std::string& output) {
  const WeightsMap map = load_weights(weights_path);
  check_class_count(map, cfg);

  ImageU8 img = read_ppm(input);
  if (img.h % 32 != 0 || img.w % 32 != 0) {
    const int64_t ph = (img.h + 31) / 32 * 32, pw = (img.w + 31) / 32 * 32;
    throw Error("input extents " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                " are not divisible by 32; pad the image to " + std::to_string(ph) + "x" +
                std::to_string(pw));
  }

  Sfanet<float> model = Sfanet<float>::make(model_config_from(cfg), 1);
  load_model_weights(model, map);
  model.set_mode(Mode::kInfer);
  model.fold_batch_norm();

  TensorF x = image_to_tensor<float>(img);
  subtract_mean(x, mean_from_weights(map, cfg));
  TensorF batch = Tensor<float>::zeros({1, 3, img.h, img.w});
  std::copy(x.data(), x.data() + x.numel(), batch.data());

  NoGradGuard ng;
  LabelBatch pred = argmax_labels(model.forward(batch).principal);
  LabelMap mask(img.h, img.w);
  std::copy(pred.labels.begin(), pred.labels.end(), mask.labels.begin());
  write_pgm(output, mask);
  std::printf("wrote %s (%" PRId64 "x%" PRId64 ")\n", output.c_str(), mask.h, mask.w);
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(const RunConfig& cfg, const std::string& weights_path, int64_t height,
              int64_t width, int64_t iters, int64_t warmup, bool fold) {
  Sfanet<float> model = Sfanet<float>::make(model_config_from(cfg), 1);
  if (!weights_path.empty()) {
    const WeightsMap map = load_weights(weights_path);
    check_class_count(map, cfg);
    load_model_weights(model, map);
  }
  model.set_mode(Mode::kInfer);
  if (fold) model.fold_batch_norm();

  std::mt19937_64 rng(splitmix64(cfg.train_seed));
  TensorF input = Tensor<float>::zeros({1, 3, height, width});
  for (auto& v : input.vec()) v = static_cast<float>(draw_unit(rng) - 0.5);

  // Warm-up forwards are untimed; bench_fps itself refuses unfolded models.
  {
    NoGradGuard ng;
    for (int64_t i = 0; i < warmup; ++i) model.forward(input);
  }
  const BenchReport report = bench_fps(model, input, iters);
  std::printf("input 1x3x%" PRId64 "x%" PRId64 ", %" PRId64 " iterations (%" PRId64
              " warm-up), bn folded: %s\n",
              height, width, iters, warmup, report.folded ? "yes" : "no");
  std::printf("mean %.3f ms   median %.3f ms   fps %.1f\n", report.mean_ms, report.median_ms,
              report.fps);
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

using ProbeList = std::vector<std::pair<std::string, TensorD>>;

struct CheckRow {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = false;
  std::string worst;
};

TensorD rand_unit(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  TensorD t = Tensor<double>::zeros(std::move(shape));
  fill_normal(t, stddev, rng);
  return t;
}

LabelBatch random_label_batch(int64_t n, int64_t h, int64_t w, int classes,
                              std::mt19937_64& rng) {
  LabelBatch lb(n, h, w);
  for (auto& v : lb.labels) v = static_cast<uint8_t>(draw_int(rng, 0, classes - 1));
  lb.labels[0] = kIgnoreLabel;
  return lb;
}

// Scalar probe loss with non-uniform weighting: sum(y * y).
TensorD quad_loss(const TensorD& y) { return sum_all(mul_broadcast(y, y)); }

class GradcheckSuite {
 public:
  explicit GradcheckSuite(bool sabotage_conv) : sabotage_conv_(sabotage_conv) {}

  void run(const std::string& name, double tolerance, const ProbeList& probe,
           const std::function<TensorD()>& loss_fn, int64_t max_probes = 12) {
    GradCheckReport<double> report =
        finite_difference_check<double>(probe, loss_fn, 1e-5, max_probes, 17);
    CheckRow row;
    row.name = name;
    row.max_rel_err = report.max_rel_err;
    row.tolerance = tolerance;
    row.pass = report.max_rel_err < tolerance;
    row.worst = report.worst_param;
    rows_.push_back(std::move(row));
  }

  bool sabotage_conv() const { return sabotage_conv_; }

  int report() const {
    std::printf("%-28s %13s %11s %8s\n", "op/block", "max_rel_err", "tolerance", "result");
    int failed = 0;
    for (const auto& r : rows_) {
      std::printf("%-28s %13.3e %11.0e %8s\n", r.name.c_str(), r.max_rel_err, r.tolerance,
                  r.pass ? "PASS" : "FAIL");
      if (!r.pass) {
        ++failed;
        std::printf("    worst parameter: %s\n", r.worst.c_str());
      }
    }
    std::printf("gradient checks: %zu/%zu passed\n", rows_.size() - static_cast<size_t>(failed),
                rows_.size());
    return failed == 0 ? 0 : 2;
  }

 private:
  bool sabotage_conv_;
  std::vector<CheckRow> rows_;
};

void check_ops(GradcheckSuite& suite) {
  std::mt19937_64 rng(404);

  {
    TensorD x = rand_unit({2, 3, 4, 5}, rng).set_requires_grad(true);
    // Keep the probe away from the relu kink at exactly zero.
    for (auto& v : x.vec())
      if (std::abs(v) < 0.05) v += 0.1;
    suite.run("relu", 1e-4, {{"x", x}}, [&] { return quad_loss(relu(x)); });
  }
  {
    TensorD x = rand_unit({2, 3, 4, 5}, rng).set_requires_grad(true);
    suite.run("sigmoid", 1e-4, {{"x", x}}, [&] { return quad_loss(sigmoid(x)); });
  }
  {
    TensorD a = rand_unit({2, 3, 4, 4}, rng).set_requires_grad(true);
    TensorD b = rand_unit({2, 3, 4, 4}, rng).set_requires_grad(true);
    suite.run("add", 1e-4, {{"a", a}, {"b", b}}, [&] { return quad_loss(add(a, b)); });
  }
  {
    TensorD x = rand_unit({2, 3, 4, 4}, rng).set_requires_grad(true);
    suite.run("scale", 1e-4, {{"x", x}}, [&] { return quad_loss(scale(x, 0.7)); });
  }
  {
    TensorD x = rand_unit({2, 4, 3, 3}, rng).set_requires_grad(true);
    TensorD g = rand_unit({2, 4, 1, 1}, rng).set_requires_grad(true);
    suite.run("mul_broadcast", 1e-4, {{"x", x}, {"gate", g}},
              [&] { return quad_loss(mul_broadcast(x, g)); });
  }
  {
    TensorD x = rand_unit({2, 3, 4, 4}, rng).set_requires_grad(true);
    suite.run("sum_all", 1e-4, {{"x", x}}, [&] { return sigmoid(sum_all(x)); });
  }
  {
    TensorD a = rand_unit({2, 3, 4, 4}, rng).set_requires_grad(true);
    TensorD b = rand_unit({2, 2, 4, 4}, rng).set_requires_grad(true);
    suite.run("concat_channels", 1e-4, {{"a", a}, {"b", b}},
              [&] { return quad_loss(concat_channels(a, b)); });
  }
  {
    TensorD x = rand_unit({2, 4, 3, 3}, rng).set_requires_grad(true);
    suite.run("softmax_channels", 1e-4, {{"x", x}},
              [&] { return quad_loss(softmax_channels(x)); });
  }
  {
    // Strided, padded, dilated convolution through the dense path.
    ConvSpec sp{3, 4, 3, 3, 2, 2, 2, 1, true};
    TensorD x = rand_unit({2, 3, 9, 9}, rng).set_requires_grad(true);
    TensorD w = rand_unit({4, 3, 3, 3}, rng, 0.3).set_requires_grad(true);
    TensorD b = rand_unit({4}, rng, 0.3).set_requires_grad(true);
    int calls = 0;
    suite.run("conv2d", 1e-4, {{"x", x}, {"w", w}, {"b", b}}, [&, sp] {
      TensorD base = quad_loss(conv2d(x, w, b, sp));
      if (suite.sabotage_conv() && calls++ > 0) {
        // Negative-control fixture: later (finite-difference) evaluations see
        // an extra linear term the recorded backward pass knows nothing
        // about, which is exactly what a broken conv gradient looks like.
        NoGradGuard ng;
        base = add(base, scale(add(sum_all(x), sum_all(w)), 0.05));
      }
      return base;
    });
  }
  {
    TensorD x = rand_unit({1, 4, 6, 6}, rng).set_requires_grad(true);
    TensorD dw = rand_unit({4, 1, 3, 3}, rng, 0.3).set_requires_grad(true);
    TensorD pw = rand_unit({6, 4, 1, 1}, rng, 0.3).set_requires_grad(true);
    suite.run("depthwise_separable_conv", 1e-4, {{"x", x}, {"dw", dw}, {"pw", pw}},
              [&] { return quad_loss(depthwise_separable_conv(x, dw, pw, 2)); });
  }
  {
    TensorD u = rand_unit({2, 8, 1, 1}, rng).set_requires_grad(true);
    TensorD k = rand_unit({3}, rng).set_requires_grad(true);
    suite.run("conv1d_channels", 1e-4, {{"u", u}, {"k", k}},
              [&] { return quad_loss(conv1d_channels(u, k)); });
  }
  {
    TensorD x = rand_unit({3, 4, 5, 5}, rng).set_requires_grad(true);
    BatchNormState<double> bn = BatchNormState<double>::make(4);
    fill_uniform(bn.gamma, 0.8, 1.2, rng);
    fill_uniform(bn.beta, -0.2, 0.2, rng);
    bn.gamma.set_requires_grad(true);
    bn.beta.set_requires_grad(true);
    suite.run("batch_norm", 1e-4, {{"x", x}, {"gamma", bn.gamma}, {"beta", bn.beta}},
              [&]() mutable { return quad_loss(batch_norm(x, bn)); });
  }
  {
    TensorD x = rand_unit({1, 3, 5, 7}, rng).set_requires_grad(true);
    suite.run("bilinear_resize", 1e-4, {{"x", x}},
              [&] { return quad_loss(bilinear_resize(x, 9, 11)); });
  }
  {
    TensorD x = rand_unit({1, 3, 6, 6}, rng).set_requires_grad(true);
    TensorD flow = rand_unit({1, 2, 6, 6}, rng, 0.4).set_requires_grad(true);
    // Push flow components away from integers, where the sampler kernel kinks.
    for (auto& v : flow.vec()) {
      const double frac = v - std::floor(v);
      if (frac < 0.15) v += 0.2;
      if (frac > 0.85) v -= 0.2;
    }
    suite.run("grid_sample_warp", 1e-4, {{"x", x}, {"flow", flow}},
              [&] { return quad_loss(grid_sample_warp(x, flow)); });
  }
  {
    TensorD x = rand_unit({2, 3, 4, 6}, rng).set_requires_grad(true);
    suite.run("global_avg_pool", 1e-4, {{"x", x}},
              [&] { return quad_loss(global_avg_pool(x)); });
  }
  {
    TensorD x = rand_unit({1, 2, 8, 8}, rng).set_requires_grad(true);
    suite.run("max_pool2d", 1e-4, {{"x", x}},
              [&] { return quad_loss(max_pool2d(x, 3, 2, 1)); });
  }
  {
    TensorD logits = rand_unit({2, 4, 4, 4}, rng).set_requires_grad(true);
    LabelBatch lb = random_label_batch(2, 4, 4, 4, rng);
    suite.run("softmax_cross_entropy", 1e-4, {{"logits", logits}},
              [&] { return softmax_cross_entropy(logits, lb); });
  }
  {
    TensorD a = rand_unit({1}, rng).set_requires_grad(true);
    TensorD b = rand_unit({1}, rng).set_requires_grad(true);
    TensorD c = rand_unit({1}, rng).set_requires_grad(true);
    suite.run("weighted_scalar_sum", 1e-4, {{"a", a}, {"b", b}, {"c", c}}, [&] {
      TensorD s = weighted_scalar_sum<double>({a, b, c}, {1.0, 0.3, 0.7});
      return sigmoid(s);  // bend the linear sum so the probe is non-trivial
    });
  }
}

void check_blocks(GradcheckSuite& suite) {
  std::mt19937_64 rng(505);

  auto probe_of = [](const ParamList<double>& params, std::initializer_list<TensorD> inputs) {
    ProbeList probe;
    for (const auto& p : params) probe.emplace_back(p.name, p.tensor);
    int i = 0;
    for (const TensorD& t : inputs) probe.emplace_back("input" + std::to_string(i++), t);
    return probe;
  };

  {
    CbrBlock<double> cbr = CbrBlock<double>::make(3, 4, rng);
    ParamList<double> params;
    cbr.collect("cbr", &params, nullptr, nullptr);
    TensorD x = rand_unit({1, 3, 6, 6}, rng).set_requires_grad(true);
    suite.run("cbr_block", 1e-4, probe_of(params, {x}),
              [&]() mutable { return quad_loss(cbr.forward(x)); }, 4);
  }
  for (int kind : {2, 3, 4}) {
    FebBlock<double> feb = FebBlock<double>::make(kind, 6, rng);
    ParamList<double> params;
    feb.collect("feb", &params, nullptr, nullptr);
    TensorD x = rand_unit({1, 6, 8, 8}, rng).set_requires_grad(true);
    suite.run("feb" + std::to_string(kind), 1e-4, probe_of(params, {x}),
              [&]() mutable { return quad_loss(feb.forward(x)); }, 4);
  }
  {
    ScaBlock<double> sca = ScaBlock<double>::make(8, rng);
    ParamList<double> params;
    sca.collect("sca", &params, nullptr, nullptr);
    TensorD x = rand_unit({1, 8, 5, 5}, rng).set_requires_grad(true);
    suite.run("sca_block", 1e-4, probe_of(params, {x}),
              [&]() mutable { return quad_loss(sca.forward(x)); }, 4);
  }
  {
    FaaBlock<double> faa = FaaBlock<double>::make(6, rng);
    // Zero-initialized flow sits on the integer sampling lattice; perturb it
    // to probe at a generic point.
    fill_uniform(faa.flow_conv.weight, -0.02, 0.02, rng);
    faa.flow_conv.bias.data()[0] = 0.35;
    faa.flow_conv.bias.data()[1] = -0.27;
    ParamList<double> params;
    faa.collect("faa", &params, nullptr, nullptr);
    TensorD hi = rand_unit({1, 6, 5, 5}, rng).set_requires_grad(true);
    TensorD lo = rand_unit({1, 6, 5, 5}, rng).set_requires_grad(true);
    suite.run("faa_block", 1e-4, probe_of(params, {hi, lo}),
              [&]() mutable { return quad_loss(faa.forward(hi, lo)); }, 4);
  }
  {
    SfaStage<double> stage = SfaStage<double>::make(3, 8, 16, rng);
    fill_uniform(stage.faa.flow_conv.weight, -0.02, 0.02, rng);
    stage.faa.flow_conv.bias.data()[0] = 0.31;
    stage.faa.flow_conv.bias.data()[1] = -0.22;
    ParamList<double> params;
    stage.collect("sfa3", &params, nullptr, nullptr);
    TensorD hi = rand_unit({1, 8, 6, 6}, rng).set_requires_grad(true);
    TensorD lo = rand_unit({1, 16, 3, 3}, rng).set_requires_grad(true);
    suite.run("sfa_stage", 1e-4, probe_of(params, {hi, lo}),
              [&]() mutable { return quad_loss(stage.forward(hi, lo)); }, 2);
  }
  {
    SegHead<double> head = SegHead<double>::make(8, 5, rng);
    ParamList<double> params;
    head.collect("head", &params, nullptr, nullptr);
    TensorD x = rand_unit({1, 8, 4, 4}, rng).set_requires_grad(true);
    suite.run("seg_head", 1e-4, probe_of(params, {x}),
              [&]() mutable { return quad_loss(head.forward(x, 8, 8)); }, 4);
  }
  {
    SfanetConfig cfg;
    cfg.num_classes = 3;
    cfg.width = 1.0 / 16.0;
    cfg.lambda = {0.3, 0.7, 1.0, 1.0};
    Sfanet<double> model = Sfanet<double>::make(cfg, 16);
    for (int i = 1; i <= 4; ++i) {
      fill_uniform(model.sfa(i).faa.flow_conv.weight, -0.02, 0.02, rng);
      model.sfa(i).faa.flow_conv.bias.data()[0] = 0.29;
      model.sfa(i).faa.flow_conv.bias.data()[1] = -0.37;
    }
    // The pooled path normalizes a single element, pinning that bn output at
    // beta; beta = 0 would park every unit exactly on the relu kink.
    fill_uniform(model.sfa(4).low_cbr.bn.beta, 0.1, 0.3, rng);

    TensorD x = rand_unit({1, 3, 64, 64}, rng).set_requires_grad(true);
    LabelBatch lb = random_label_batch(1, 64, 64, 3, rng);
    ParamList<double> params;
    model.collect(&params, nullptr, nullptr);
    ProbeList probe;
    for (const auto& p : params) probe.emplace_back(p.name, p.tensor);
    probe.emplace_back("input", x);
    suite.run("full_model", 1e-3, probe,
              [&]() mutable {
                SegOutput<double> out = model.forward(x);
                return total_loss(out, lb, cfg.lambda).total;
              },
              2);
  }
}

int cmd_gradcheck(bool sabotage_conv) {
  GradcheckSuite suite(sabotage_conv);
  check_ops(suite);
  check_blocks(suite);
  return suite.report();
}

// ---------------------------------------------------------------------------
// Flag plumbing: defaults < config file < dotted flags, plus --seed on top.
// ---------------------------------------------------------------------------

struct FlagSet {
  RunConfig staged;
  std::vector<std::pair<size_t, CLI::Option*>> opts;  // index into config_fields
  std::string config_path;
  CLI::Option* config_opt = nullptr;
  uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* sub) {
    config_opt = sub->add_option("--config", config_path,
                                 "run configuration file (key = value lines)");
    seed_opt = sub->add_option("--seed", seed, "override train.seed and data.seed");
    const std::vector<ConfigField> fields = config_fields(staged);
    for (size_t i = 0; i < fields.size(); ++i) {
      const ConfigField& f = fields[i];
      CLI::Option* o = nullptr;
      const std::string flag = "--" + std::string(f.name);
      switch (f.kind) {
        case FieldKind::kInt:
          o = sub->add_option(flag, *static_cast<int64_t*>(f.ptr));
          break;
        case FieldKind::kUint:
          o = sub->add_option(flag, *static_cast<uint64_t*>(f.ptr));
          break;
        case FieldKind::kFloat:
          o = sub->add_option(flag, *static_cast<double*>(f.ptr));
          break;
        case FieldKind::kString:
          o = sub->add_option(flag, *static_cast<std::string*>(f.ptr));
          break;
      }
      o->group("config overrides");
      opts.emplace_back(i, o);
    }
  }

  RunConfig resolve() {
    RunConfig cfg;
    if (config_opt->count()) load_config_file(cfg, config_path);
    const std::vector<ConfigField> staged_fields = config_fields(staged);
    const std::vector<ConfigField> dst_fields = config_fields(cfg);
    for (const auto& [i, opt] : opts) {
      if (!opt->count()) continue;
      const ConfigField& src = staged_fields[i];
      const ConfigField& dst = dst_fields[i];
      switch (src.kind) {
        case FieldKind::kInt:
          *static_cast<int64_t*>(dst.ptr) = *static_cast<int64_t*>(src.ptr);
          break;
        case FieldKind::kUint:
          *static_cast<uint64_t*>(dst.ptr) = *static_cast<uint64_t*>(src.ptr);
          break;
        case FieldKind::kFloat:
          *static_cast<double*>(dst.ptr) = *static_cast<double*>(src.ptr);
          break;
        case FieldKind::kString:
          *static_cast<std::string*>(dst.ptr) = *static_cast<std::string*>(src.ptr);
          break;
      }
    }
    if (seed_opt->count()) {
      cfg.train_seed = seed;
      cfg.data_seed = seed;
    }
    return cfg;
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"stage-aware feature-alignment segmentation toolkit"};
  app.require_subcommand(1);

  // One flag set per subcommand; addresses must stay stable while CLI11
  // holds pointers into them.
  std::array<FlagSet, 6> flags;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  bool force = false;
  gen->add_flag("--force", force, "overwrite an existing dataset");
  flags[0].attach(gen);

  CLI::App* train = app.add_subcommand("train", "train a model");
  std::string resume_path;
  train->add_option("--resume", resume_path, "checkpoint to resume from");
  flags[1].attach(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate weights on a dataset split");
  std::string eval_weights, eval_split = "val";
  eval->add_option("--weights", eval_weights, "weights file")->required();
  eval->add_option("--split", eval_split, "train or val");
  flags[2].attach(eval);

  CLI::App* infer = app.add_subcommand("infer", "predict a mask for one image");
  std::string infer_weights, infer_input, infer_output;
  infer->add_option("--weights", infer_weights, "weights file")->required();
  infer->add_option("--input", infer_input, "input image (ppm)")->required();
  infer->add_option("--output", infer_output, "output mask (pgm)")->required();
  flags[3].attach(infer);

  CLI::App* bench = app.add_subcommand("bench", "measure folded inference speed");
  std::string bench_weights;
  int64_t bench_h = 64, bench_w = 128, bench_iters = 5000, bench_warmup = 10;
  bool bench_no_fold = false;
  bench->add_option("--weights", bench_weights, "weights file (fresh init when omitted)");
  bench->add_option("--height", bench_h, "input height");
  bench->add_option("--width", bench_w, "input width");
  bench->add_option("--iters", bench_iters, "timed iterations (protocol default 5000)");
  bench->add_option("--warmup", bench_warmup, "untimed warm-up iterations");
  bench->add_flag("--no-fold", bench_no_fold,
                  "skip bn folding (the measurement harness refuses this)");
  flags[4].attach(bench);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  bool sabotage_conv = false;
  gradcheck
      ->add_flag("--sabotage-conv", sabotage_conv,
                 "negative-control fixture: report a deliberately broken conv gradient")
      ->group("");
  flags[5].attach(gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(flags[0].resolve(), force);
    if (train->parsed()) return cmd_train(flags[1].resolve(), resume_path);
    if (eval->parsed()) return cmd_eval(flags[2].resolve(), eval_weights, eval_split);
    if (infer->parsed())
      return cmd_infer(flags[3].resolve(), infer_weights, infer_input, infer_output);
    if (bench->parsed())
      return cmd_bench(flags[4].resolve(), bench_weights, bench_h, bench_w, bench_iters,
                       bench_warmup, !bench_no_fold);
    if (gradcheck->parsed()) return cmd_gradcheck(sabotage_conv);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

}  // namespace sfanet
