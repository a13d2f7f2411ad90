#include "sfanet/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>

namespace sfanet {

std::vector<ConfigField> config_fields(RunConfig& c) {
  return {
      {"model.classes", FieldKind::kInt, &c.model_classes},
      {"model.width", FieldKind::kFloat, &c.model_width},
      {"model.in_h", FieldKind::kInt, &c.model_in_h},
      {"model.in_w", FieldKind::kInt, &c.model_in_w},
      {"model.lambda1", FieldKind::kFloat, &c.model_lambda1},
      {"model.lambda2", FieldKind::kFloat, &c.model_lambda2},
      {"model.lambda3", FieldKind::kFloat, &c.model_lambda3},
      {"model.lambda4", FieldKind::kFloat, &c.model_lambda4},
      {"train.base_lr", FieldKind::kFloat, &c.train_base_lr},
      {"train.total_iters", FieldKind::kInt, &c.train_total_iters},
      {"train.batch_size", FieldKind::kInt, &c.train_batch_size},
      {"train.momentum", FieldKind::kFloat, &c.train_momentum},
      {"train.weight_decay", FieldKind::kFloat, &c.train_weight_decay},
      {"train.ohem_theta", FieldKind::kFloat, &c.train_ohem_theta},
      {"train.ohem_min_kept", FieldKind::kInt, &c.train_ohem_min_kept},
      {"train.flip_prob", FieldKind::kFloat, &c.train_flip_prob},
      {"train.scale_min", FieldKind::kFloat, &c.train_scale_min},
      {"train.scale_max", FieldKind::kFloat, &c.train_scale_max},
      {"train.crop_h", FieldKind::kInt, &c.train_crop_h},
      {"train.crop_w", FieldKind::kInt, &c.train_crop_w},
      {"train.seed", FieldKind::kUint, &c.train_seed},
      {"train.log_every", FieldKind::kInt, &c.train_log_every},
      {"train.val_every", FieldKind::kInt, &c.train_val_every},
      {"data.height", FieldKind::kInt, &c.data_height},
      {"data.width", FieldKind::kInt, &c.data_width},
      {"data.shapes", FieldKind::kInt, &c.data_shapes},
      {"data.scale_min", FieldKind::kFloat, &c.data_scale_min},
      {"data.scale_max", FieldKind::kFloat, &c.data_scale_max},
      {"data.noise", FieldKind::kFloat, &c.data_noise},
      {"data.seed", FieldKind::kUint, &c.data_seed},
      {"data.train_count", FieldKind::kInt, &c.data_train_count},
      {"data.val_count", FieldKind::kInt, &c.data_val_count},
      {"data.mean_r", FieldKind::kFloat, &c.data_mean_r},
      {"data.mean_g", FieldKind::kFloat, &c.data_mean_g},
      {"data.mean_b", FieldKind::kFloat, &c.data_mean_b},
      {"paths.data_dir", FieldKind::kString, &c.paths_data_dir},
      {"paths.checkpoint_dir", FieldKind::kString, &c.paths_checkpoint_dir},
  };
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  std::from_chars_result res{};
  if constexpr (std::is_floating_point_v<T>)
    res = std::from_chars(first, last, out, std::chars_format::general);
  else
    res = std::from_chars(first, last, out);
  SFA_CHECK(res.ec == std::errc() && res.ptr == last)
      << "config: bad value '" << value << "' for key " << key;
  return out;
}

}  // namespace

void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const ConfigField& f : config_fields(cfg)) {
    if (key != f.name) continue;
    switch (f.kind) {
      case FieldKind::kInt:
        *static_cast<int64_t*>(f.ptr) = parse_number<int64_t>(key, value);
        return;
      case FieldKind::kUint:
        *static_cast<uint64_t*>(f.ptr) = parse_number<uint64_t>(key, value);
        return;
      case FieldKind::kFloat:
        *static_cast<double*>(f.ptr) = parse_number<double>(key, value);
        return;
      case FieldKind::kString:
        SFA_CHECK(!value.empty()) << "config: empty value for key " << key;
        *static_cast<std::string*>(f.ptr) = value;
        return;
    }
  }
  SFA_CHECK(false) << "config: unknown key '" << key << "'";
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  SFA_CHECK(in.good()) << "cannot open config file " << path;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    SFA_CHECK(eq != std::string::npos) << path << ":" << lineno << ": expected 'key = value'";
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    SFA_CHECK(!key.empty()) << path << ":" << lineno << ": missing key";
    try {
      apply_config_value(cfg, key, value);
    } catch (const Error& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string render_config(const RunConfig& cfg) {
  RunConfig& mut = const_cast<RunConfig&>(cfg);
  std::string out;
  char buf[64];
  for (const ConfigField& f : config_fields(mut)) {
    out += f.name;
    out += " = ";
    switch (f.kind) {
      case FieldKind::kInt:
        out += std::to_string(*static_cast<int64_t*>(f.ptr));
        break;
      case FieldKind::kUint:
        out += std::to_string(*static_cast<uint64_t*>(f.ptr));
        break;
      case FieldKind::kFloat:
        std::snprintf(buf, sizeof(buf), "%g", *static_cast<double*>(f.ptr));
        out += buf;
        break;
      case FieldKind::kString:
        out += *static_cast<std::string*>(f.ptr);
        break;
    }
    out += "\n";
  }
  return out;
}

}  // namespace sfanet
