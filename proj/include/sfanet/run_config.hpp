#ifndef SFANET_RUN_CONFIG_HPP
#define SFANET_RUN_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "sfanet/common.hpp"

namespace sfanet {

// All run settings, one field per dotted config key. Parsed from a plain-text
// file of `key = value` lines ('#' comments); unknown keys are rejected.
// Every field is also exposed as a CLI flag of the same dotted name.
struct RunConfig {
  // model
  int64_t model_classes = 4;
  double model_width = 0.25;
  int64_t model_in_h = 64;
  int64_t model_in_w = 64;
  double model_lambda1 = 0;
  double model_lambda2 = 0;
  double model_lambda3 = 1;
  double model_lambda4 = 1;
  // train
  double train_base_lr = 0.01;
  int64_t train_total_iters = 2000;
  int64_t train_batch_size = 8;
  double train_momentum = 0.9;
  double train_weight_decay = 5e-4;
  double train_ohem_theta = 0.7;
  int64_t train_ohem_min_kept = 0;  // 0 = batch pixels / 16
  double train_flip_prob = 0.5;
  double train_scale_min = 0.5;
  double train_scale_max = 2.0;
  int64_t train_crop_h = 0;  // 0 = model.in_h
  int64_t train_crop_w = 0;  // 0 = model.in_w
  uint64_t train_seed = 1;
  int64_t train_log_every = 10;
  int64_t train_val_every = 500;
  // data
  int64_t data_height = 64;
  int64_t data_width = 64;
  int64_t data_shapes = 5;
  double data_scale_min = 0.2;
  double data_scale_max = 0.9;
  double data_noise = 0.1;
  uint64_t data_seed = 7;
  int64_t data_train_count = 256;
  int64_t data_val_count = 64;
  double data_mean_r = -1;  // <0 = take the value recorded in the dataset manifest
  double data_mean_g = -1;
  double data_mean_b = -1;
  // paths
  std::string paths_data_dir = "data";
  std::string paths_checkpoint_dir = "checkpoints";
};

enum class FieldKind { kInt, kUint, kFloat, kString };

struct ConfigField {
  const char* name;  // dotted key
  FieldKind kind;
  void* ptr;
};

std::vector<ConfigField> config_fields(RunConfig& cfg);

// Throws Error on unknown keys or unparseable values.
void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
void load_config_file(RunConfig& cfg, const std::string& path);

// One `key = value` line per field, suitable for run headers and as a
// documented-defaults reference.
std::string render_config(const RunConfig& cfg);

}  // namespace sfanet

#endif
