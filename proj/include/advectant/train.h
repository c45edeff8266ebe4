#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "advectant/data.h"
#include "advectant/model.h"
#include "advectant/nn.h"

namespace advectant {

/// Raised when a loss or gradient stops being finite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimConfig {
  double lr = 0.001;
  double weight_decay = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
  int epochs = 200;
  double lr_decay = 0.8;
  int lr_decay_every = 20;
  double bn_momentum_start = 0.5;
  double bn_momentum_end = 0.01;
  // Global gradient norm cap; 0 disables clipping.
  double grad_clip = 10.0;

  void Validate() const;
};

/// lr * lr_decay^floor(epoch / lr_decay_every).
double LrAt(const OptimConfig& config, int epoch);
/// Linear from bn_momentum_start at epoch 0 to bn_momentum_end at the last
/// epoch (epochs - 1).
double BnMomentumAt(const OptimConfig& config, int epoch);

/// AdamW over a parameter set. Decay is decoupled (theta -= lr * wd * theta)
/// and skipped for parameters registered without decay.
template <typename T>
class AdamW {
 public:
  AdamW(ParameterSet<T> params, const OptimConfig& config);

  /// One update using the parameters' current gradients. Throws
  /// NonFiniteError, leaving every parameter untouched, if any gradient is
  /// NaN or infinite.
  void Step(double lr);

  int64_t step_count() const { return step_; }
  const ParameterSet<T>& params() const { return params_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_step_count(int64_t t) { step_ = t; }

 private:
  ParameterSet<T> params_;
  OptimConfig config_;
  int64_t step_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

/// Scales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before scaling.
template <typename T>
double ClipGradNorm(const ParameterSet<T>& params, double max_norm);

struct AugmentConfig {
  bool enabled = true;
  // Axis the random rotation turns about (0 = x, 1 = y, 2 = z).
  int vertical_axis = 1;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;

  void Validate() const;
};

/// Rotation about the vertical axis, per-axis scale, clipped Gaussian jitter,
/// then renormalization to [-1,1]^3. Operates in place on xyz triples.
void Augment(std::span<float> xyz, std::mt19937_64& rng, const AugmentConfig& config);

/// Fraction of equal entries.
double Accuracy(std::span<const int> predicted, std::span<const int> truth);

/// Mean IoU over `parts` for one shape; a part absent from both the
/// prediction and the ground truth scores 1.
double ShapeIoU(std::span<const int> predicted, std::span<const int> truth,
                std::span<const int> parts);

struct EvalMetrics {
  double loss = 0;
  // Classification accuracy or segmentation mIoU.
  double metric = 0;
  int64_t samples = 0;
  std::vector<int> predictions;
};

/// Inference over a whole dataset with running batch statistics and no
/// dropout. For segmentation the part set of each category is the set of
/// part labels its ground-truth shapes use; mIoU averages ShapeIoU over
/// shapes.
template <typename T>
EvalMetrics Evaluate(AdvectiveNet<T>& model, const Dataset& dataset, int batch_size);

/// Row-major [B,P,3] tensor from a batch.
template <typename T>
Tensor<T> BatchTensor(const Batch& batch);

/// Index of the largest entry per row of logits [M,C].
template <typename T>
std::vector<int> ArgMaxRows(const Tensor<T>& logits);

}  // namespace advectant
