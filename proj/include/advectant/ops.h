#pragma once

#include <random>
#include <span>
#include <vector>

#include "advectant/tensor.h"

namespace advectant {

// Elementwise ops. Shapes must match exactly; there is no broadcasting.
template <typename T>
Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> Sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> Mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> Scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> Relu(const Tensor<T>& x);

/// Sum / mean of all elements, as a scalar tensor.
template <typename T>
Tensor<T> Sum(const Tensor<T>& x);
template <typename T>
Tensor<T> Mean(const Tensor<T>& x);

/// Same values, new shape with the same element count.
template <typename T>
Tensor<T> Reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> Concat(const std::vector<Tensor<T>>& parts, int axis);

// Reductions drop `axis`. ReduceMax routes the gradient to the first
// maximal index along the axis.
template <typename T>
Tensor<T> ReduceMax(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> ReduceMean(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> ReduceSum(const Tensor<T>& x, int axis);

/// Inserts a new axis of extent `count` at `axis`, repeating x along it.
template <typename T>
Tensor<T> Expand(const Tensor<T>& x, int axis, int64_t count);

/// out[b,p,:] = x[b, index[b * P + p], :] for x [B,P,C]; indices lie in
/// [0, P). Repeated indices accumulate in the backward pass.
template <typename T>
Tensor<T> GatherParticles(const Tensor<T>& x, std::span<const int64_t> index);

/// y = x Wᵀ + b for x [B,Cin], W [Cout,Cin], b [Cout].
template <typename T>
Tensor<T> Linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Stride-1 cross-correlation with zero padding k/2 (odd k), preserving the
/// spatial extents. x [B,Cin,D,H,W], weight [Cout,Cin,k,k,k], bias [Cout].
template <typename T>
Tensor<T> Conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormStats(int64_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

inline constexpr double kBatchNormEps = 1e-5;

/// Per-channel normalization over x [B,C,...]. In training mode batch
/// statistics are used and the running stats move toward them:
/// running = (1 - momentum) * running + momentum * batch.
template <typename T>
Tensor<T> BatchNorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, T momentum, bool training);

/// Inverted dropout; identity when not training or rate == 0.
template <typename T>
Tensor<T> Dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng, bool training);

/// Mean over rows of the cross-entropy between softmax(logits) and a smoothed
/// one-hot target: `confidence` on the true class, the remainder spread
/// uniformly over the other classes. logits [M,C], targets size M.
template <typename T>
Tensor<T> SmoothedCrossEntropy(const Tensor<T>& logits, std::span<const int> targets,
                               T confidence);

}  // namespace advectant
