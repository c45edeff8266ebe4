#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "advectant/ops.h"
#include "advectant/tensor.h"

namespace advectant {

/// Mutable view of one named learnable tensor.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
  // False for biases and normalization affine terms (no weight decay).
  bool decay = true;
};

/// Mutable view of one named non-learnable state vector (running stats).
template <typename T>
struct BufferRef {
  std::string name;
  std::vector<T>* values = nullptr;
};

/// Flat registry of a model's parameters and buffers in a stable order.
template <typename T>
class ParameterSet {
 public:
  void AddParam(std::string name, Tensor<T>& tensor, bool decay) {
    params_.push_back({std::move(name), &tensor, decay});
  }
  void AddBuffer(std::string name, std::vector<T>& values) {
    buffers_.push_back({std::move(name), &values});
  }

  const std::vector<ParamRef<T>>& params() const { return params_; }
  const std::vector<BufferRef<T>>& buffers() const { return buffers_; }

  int64_t NumParameters() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor->numel();
    return n;
  }
  void ZeroGrad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<BufferRef<T>> buffers_;
};

/// Per-forward switches shared by every layer.
template <typename T>
struct ForwardContext {
  bool training = false;
  T bn_momentum = T(0.5);
  std::mt19937_64* rng = nullptr;
};

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), matching the common default for
// linear and convolution layers.
template <typename T>
Tensor<T> UniformInit(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(NumElements(shape));
  for (T& v : values) v = static_cast<T>(dist(rng));
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad();
  return t;
}

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, std::mt19937_64& rng)
      : weight(UniformInit<T>({out, in}, in, rng)), bias(UniformInit<T>({out}, in, rng)) {}

  int64_t in_features() const { return weight.shape()[1]; }
  int64_t out_features() const { return weight.shape()[0]; }
  Tensor<T> operator()(const Tensor<T>& x) const { return Linear(x, weight, bias); }

  void Collect(const std::string& prefix, ParameterSet<T>& set) {
    set.AddParam(prefix + ".weight", weight, true);
    set.AddParam(prefix + ".bias", bias, false);
  }
};

template <typename T>
struct Conv3dLayer {
  Tensor<T> weight;  // [out, in, k, k, k]
  Tensor<T> bias;

  Conv3dLayer() = default;
  Conv3dLayer(int64_t in, int64_t out, int64_t kernel, std::mt19937_64& rng)
      : weight(UniformInit<T>({out, in, kernel, kernel, kernel}, in * kernel * kernel * kernel,
                              rng)),
        bias(UniformInit<T>({out}, in * kernel * kernel * kernel, rng)) {}

  int64_t in_channels() const { return weight.shape()[1]; }
  int64_t out_channels() const { return weight.shape()[0]; }
  Tensor<T> operator()(const Tensor<T>& x) const { return Conv3d(x, weight, bias); }

  void Collect(const std::string& prefix, ParameterSet<T>& set) {
    set.AddParam(prefix + ".weight", weight, true);
    set.AddParam(prefix + ".bias", bias, false);
  }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormStats<T> stats;

  BatchNormLayer() = default;
  explicit BatchNormLayer(int64_t channels)
      : gamma(Shape{channels}, T(1)), beta(Shape{channels}, T(0)), stats(channels) {
    gamma.set_requires_grad();
    beta.set_requires_grad();
  }

  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext<T>& ctx) {
    return BatchNorm(x, gamma, beta, stats, ctx.bn_momentum, ctx.training);
  }

  void Collect(const std::string& prefix, ParameterSet<T>& set) {
    set.AddParam(prefix + ".gamma", gamma, false);
    set.AddParam(prefix + ".beta", beta, false);
    set.AddBuffer(prefix + ".running_mean", stats.running_mean);
    set.AddBuffer(prefix + ".running_var", stats.running_var);
  }
};

/// Linear -> BatchNorm -> ReLU on rows of x [M, in].
template <typename T>
struct DenseBlock {
  LinearLayer<T> linear;
  BatchNormLayer<T> norm;

  DenseBlock() = default;
  DenseBlock(int64_t in, int64_t out, std::mt19937_64& rng)
      : linear(in, out, rng), norm(out) {}

  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext<T>& ctx) {
    return Relu(norm(linear(x), ctx));
  }

  void Collect(const std::string& prefix, ParameterSet<T>& set) {
    linear.Collect(prefix + ".linear", set);
    norm.Collect(prefix + ".bn", set);
  }
};

/// Applies a row-wise block to per-particle features [B,P,C].
template <typename T, typename Block>
Tensor<T> PerParticle(Block& block, const Tensor<T>& x, const ForwardContext<T>& ctx) {
  const int64_t b = x.shape()[0];
  const int64_t p = x.shape()[1];
  Tensor<T> flat = Reshape(x, {b * p, x.shape()[2]});
  Tensor<T> y = block(flat, ctx);
  return Reshape(y, {b, p, y.shape()[1]});
}

}  // namespace advectant
