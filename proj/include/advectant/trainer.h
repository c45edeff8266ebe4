#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "advectant/checkpoint.h"
#include "advectant/config.h"
#include "advectant/data.h"
#include "advectant/model.h"
#include "advectant/train.h"

namespace advectant {

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  // Mean loss over the training batches of the epoch.
  double train_loss = 0;
  // Inference-mode metric over the training split; NaN when not evaluated.
  double train_metric = 0;
  double test_loss = 0;
  double test_metric = 0;
};

/// Runs the optimization loop of one configuration.
///
/// Run directory layout: config.json (resolved), metrics.csv with columns
/// epoch,split,loss,metric,lr, and checkpoints/{last,best}.{json,bin}.
template <typename T>
class Trainer {
 public:
  using StopFn = std::function<bool(const EpochRecord&)>;

  Trainer(RunConfig config, Dataset train, Dataset test);

  /// Continues from a checkpoint written by a trainer with the same config.
  void Resume(const Checkpoint& checkpoint);

  /// Trains from the next epoch through config.optim.epochs - 1, or until
  /// `stop` returns true. With an empty run_dir nothing is written.
  /// Throws NonFiniteError on a non-finite loss; checkpoints already on disk
  /// are left as they were.
  std::vector<EpochRecord> Run(const std::filesystem::path& run_dir, const StopFn& stop = {});

  /// One pass over the shuffled training split; returns the mean batch loss.
  double TrainEpoch(int epoch);

  AdvectiveNet<T>& model() { return *model_; }
  AdamW<T>& optimizer() { return *optimizer_; }
  const RunConfig& config() const { return config_; }
  int next_epoch() const { return next_epoch_; }
  const Dataset& train_set() const { return train_; }
  const Dataset& test_set() const { return test_; }

  void SaveTo(const std::filesystem::path& stem, int epoch);

 private:
  RunConfig config_;
  Dataset train_;
  Dataset test_;
  std::unique_ptr<AdvectiveNet<T>> model_;
  std::unique_ptr<AdamW<T>> optimizer_;
  std::mt19937_64 rng_;
  int next_epoch_ = 0;
  double best_metric_;
};

/// Writes the resolved config into a fresh run directory. Refuses to touch
/// an existing directory unless `force` is set, in which case its contents
/// are removed first.
void PrepareRunDirectory(const std::filesystem::path& dir, const RunConfig& config, bool force);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace advectant
