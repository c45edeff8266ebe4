#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "advectant/advect.h"
#include "advectant/nn.h"
#include "advectant/tensor.h"
#include "advectant/transfer.h"

namespace advectant {

enum class Task { kClassification, kSegmentation };

std::string TaskName(Task task);
Task ParseTask(const std::string& name);

struct ModelConfig {
  Task task = Task::kClassification;
  // Classes for classification; part labels for segmentation.
  int num_classes = 10;
  int grid = 16;
  double half_extent = 1.0;
  AdvectionParams advection;
  double lambda_boundary = 1.0;
  double lambda_gather = 0.01;
  double lambda_diffusion = 0.01;
  double label_confidence = 0.8;
  double dropout = 0.3;
  std::vector<int> embed_widths = {64, 64};
  // Classification only: per-particle lift applied before global pooling.
  int global_width = 1024;
  // Hidden widths of the task head; empty selects the per-task default
  // (512,256 for classification, 256,128 for segmentation).
  std::vector<int> head_widths;

  /// Classification with a 16^3 grid, or segmentation with a 32^3 grid.
  static ModelConfig Defaults(Task task, int num_classes);

  GridSpec grid_spec() const { return GridSpec{grid, half_extent}; }
  std::vector<int> ResolvedHeadWidths() const;
  void Validate() const;
};

template <typename T>
struct ModelOutput {
  // [B,C] for classification, [B,P,C] for segmentation.
  Tensor<T> logits;
  // Particle positions after the last advection step, [B,P,3], in input order.
  Tensor<T> positions;
};

/// The advective network: multiscale descriptor -> embedding MLP -> S
/// advection steps -> task head.
///
/// Each cloud is processed in lexicographic order of its points and per-point
/// outputs are mapped back to input order, so every reduction over particles
/// is independent of the order the points were supplied in.
template <typename T>
class AdvectiveNet {
 public:
  AdvectiveNet(const ModelConfig& config, uint64_t seed);
  AdvectiveNet(const AdvectiveNet&) = delete;
  AdvectiveNet& operator=(const AdvectiveNet&) = delete;

  /// clouds [B,P,3] (or [P,3] for one cloud) normalized to the domain.
  /// The sink, if given, receives each step's state in input point order.
  ModelOutput<T> Forward(const Tensor<T>& clouds, const ForwardContext<T>& ctx,
                         const TrajectorySink<T>& sink = nullptr);

  /// Registry of all parameters and buffers, in a fixed order.
  ParameterSet<T> Parameters();
  int64_t NumParameters();

  const ModelConfig& config() const { return config_; }
  std::vector<AdvectionStep<T>>& steps() { return steps_; }
  int64_t final_feature_width() const;

 private:
  ModelConfig config_;
  std::vector<DenseBlock<T>> embed_;
  std::vector<AdvectionStep<T>> steps_;
  DenseBlock<T> lift_;
  std::vector<DenseBlock<T>> head_;
  LinearLayer<T> classifier_;
};

/// (1/n) sum_p max(0, |x_p| - 1) over every particle in positions [..,3].
template <typename T>
Tensor<T> BoundaryPenalty(const Tensor<T>& positions);

/// Per cloud: 1/2 sum over ordered label pairs l != m of
/// max(0, 1 - |c_l - c_m|), with c_l the mean position of label l.
/// Averaged over the clouds in the batch. labels has one entry per particle.
template <typename T>
Tensor<T> GatherPenalty(const Tensor<T>& positions, std::span<const int> labels);

/// (1/n) sum_p |c_{l(p)} - x_p| with label centers taken per cloud.
template <typename T>
Tensor<T> DiffusionPenalty(const Tensor<T>& positions, std::span<const int> labels);

template <typename T>
struct LossTerms {
  Tensor<T> total;
  T cross_entropy = 0;
  T boundary = 0;
  T gather = 0;
  T diffusion = 0;
};

/// Smoothed cross-entropy plus the boundary penalty; segmentation adds the
/// gather and diffusion penalties using `targets` (one label per point) as
/// the ground-truth grouping. Classification expects one target per cloud.
template <typename T>
LossTerms<T> ComputeLoss(const ModelOutput<T>& output, std::span<const int> targets,
                         const ModelConfig& config);

extern template class AdvectiveNet<float>;
extern template class AdvectiveNet<double>;

}  // namespace advectant
