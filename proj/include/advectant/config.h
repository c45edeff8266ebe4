#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>

#include "json.hpp"

#include "advectant/data.h"
#include "advectant/model.h"
#include "advectant/train.h"

namespace advectant {

/// Where training and test samples come from: a dataset manifest, or the
/// built-in synthetic generators when `manifest` is empty.
struct DataConfig {
  std::filesystem::path manifest;
  // "classification" (sphere/box/two-clusters) or "segmentation"
  // (striped cylinders).
  std::string synthetic = "classification";
  int train_count = 200;
  int test_count = 60;
  int points = 64;
  uint64_t seed = 1;
  // Keep only samples of this category (sample label); -1 keeps all. Used to
  // train one segmentation model per category.
  int category = -1;
};

/// Everything a run needs. Serialized as JSON; missing keys take defaults,
/// unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  AugmentConfig augment;
  DataConfig data;
  uint64_t seed = 0;
  std::filesystem::path out = "runs/default";
  // Write the rolling checkpoint every this many epochs (and after the last).
  int checkpoint_every = 10;
  // Also evaluate the training split after each epoch.
  bool eval_train = true;
  // Train in 64-bit precision.
  bool f64 = false;

  void Validate() const;
};

nlohmann::json ToJson(const ModelConfig& config);
ModelConfig ModelConfigFromJson(const nlohmann::json& j);

nlohmann::json ToJson(const RunConfig& config);
/// Relative data paths are resolved against `base_dir`.
RunConfig RunConfigFromJson(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig LoadRunConfig(const std::filesystem::path& path);

/// (train, test) datasets described by the config, validated against the
/// model's class count.
std::pair<Dataset, Dataset> LoadDatasets(const RunConfig& config);

}  // namespace advectant
