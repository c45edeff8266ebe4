#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "advectant/config.h"
#include "advectant/model.h"
#include "advectant/train.h"

namespace advectant {

// A checkpoint is a pair of files sharing a stem: <stem>.json describes every
// record (name, kind, shape, element offset) and <stem>.bin holds the values
// back to back as little-endian floats of the recorded dtype.

struct CheckpointMeta {
  // Last completed epoch, -1 before any training.
  int epoch = -1;
  double best_metric = -std::numeric_limits<double>::infinity();
  int64_t optimizer_step = 0;
  // Serialized engine state of the training RNG.
  std::string rng_state;
  nlohmann::json config;
};

struct CheckpointRecord {
  std::string name;
  // "param", "buffer", "adam_m" or "adam_v".
  std::string kind;
  Shape shape;
  std::vector<double> values;
};

/// Writes both files through temporaries and renames them into place, so an
/// interrupted save leaves any previous checkpoint intact.
template <typename T>
void SaveCheckpoint(const std::filesystem::path& stem, AdvectiveNet<T>& model,
                    AdamW<T>* optimizer, const CheckpointMeta& meta);

class Checkpoint {
 public:
  /// Accepts a stem, either of its two files, or a run directory (which
  /// selects checkpoints/<preferred>).
  static Checkpoint Read(const std::filesystem::path& path, const std::string& preferred = "last");

  const CheckpointMeta& meta() const { return meta_; }
  const std::string& dtype() const { return dtype_; }
  const std::vector<CheckpointRecord>& records() const { return records_; }
  const std::filesystem::path& stem() const { return stem_; }

  RunConfig run_config() const;

  /// Copies parameters and buffers by name; names and shapes must match.
  template <typename T>
  void RestoreModel(AdvectiveNet<T>& model) const;
  template <typename T>
  void RestoreOptimizer(AdamW<T>& optimizer) const;

 private:
  std::filesystem::path stem_;
  std::string dtype_;
  CheckpointMeta meta_;
  std::vector<CheckpointRecord> records_;
};

}  // namespace advectant
