#pragma once

#include <array>
#include <functional>
#include <random>
#include <string>

#include "advectant/nn.h"
#include "advectant/tensor.h"
#include "advectant/transfer.h"

namespace advectant {

struct AdvectionParams {
  double alpha = 0.5;       // PIC weight in the PIC/FLIP blend
  double total_time = 1.0;  // T; the step size is T / steps
  int steps = 2;
  int reduce_width = 32;
  std::array<int, 3> conv_widths = {32, 16, 32};
  int velocity_hidden = 16;

  double dt() const { return steps > 0 ? total_time / steps : 0.0; }
  void Validate() const;
};

/// Lagrangian state of a batch of clouds. positions/velocities [B,P,3],
/// masses [B,P], features [B,P,K].
template <typename T>
struct ParticleSystem {
  Tensor<T> positions;
  Tensor<T> velocities;
  Tensor<T> masses;
  Tensor<T> features;

  int64_t batch() const { return positions.shape()[0]; }
  int64_t particles() const { return positions.shape()[1]; }
  int64_t feature_width() const { return features.shape()[2]; }

  /// Unit masses and zero velocities around the given positions/features.
  static ParticleSystem AtRest(Tensor<T> positions, Tensor<T> features);
};

/// Everything one advection step produced, handed to trajectory sinks.
template <typename T>
struct StepTrace {
  int step = 0;  // 1-based index of the step that just ran
  Tensor<T> previous_positions;
  Tensor<T> previous_velocities;
  Tensor<T> masses;
  GridField<T> grid_velocity;  // V on the grid, [B,3,N,N,N]
  Tensor<T> positions;
  Tensor<T> velocities;
};

template <typename T>
using TrajectorySink = std::function<void(const StepTrace<T>&)>;

/// v_PIC = I(V); v_FLIP = v_old + I(V - I'(v_old));
/// returns alpha * v_PIC + (1 - alpha) * v_FLIP, where I gathers grid to
/// particles and I' is the normalized mass-weighted scatter.
template <typename T>
Tensor<T> PicFlip(const Tensor<T>& old_velocities, const GridField<T>& grid_velocity,
                  const Tensor<T>& positions, const Tensor<T>& masses, T alpha);

/// Explicit Euler: x + v * dt.
template <typename T>
Tensor<T> Integrate(const Tensor<T>& positions, const Tensor<T>& velocities, T dt);

/// Learnable weights of one advection step.
template <typename T>
class AdvectionStep {
 public:
  AdvectionStep(int64_t in_width, const AdvectionParams& params, std::mt19937_64& rng);

  int64_t in_width() const { return reduce_.linear.in_features(); }
  int64_t out_width() const;

  /// conv-bn-relu x3 over the scattered features; keeps the spatial size.
  GridField<T> ForceField(const GridField<T>& grid_features, const ForwardContext<T>& ctx);

  /// Per-node two-layer network (1x1x1 convolutions) to a 3-channel field.
  /// No activation on the output.
  GridField<T> VelocityField(const GridField<T>& force) const;

  /// reduce -> P2G -> force field -> {G2P, velocity field} -> PIC/FLIP ->
  /// Euler update; features grow by the reduced and gathered widths.
  ParticleSystem<T> Forward(const ParticleSystem<T>& system, const GridSpec& spec,
                            const AdvectionParams& params, const ForwardContext<T>& ctx,
                            int step_index = 0, const TrajectorySink<T>& sink = nullptr);

  void Collect(const std::string& prefix, ParameterSet<T>& set);

  // Exposed for tests and tooling.
  DenseBlock<T>& reduce() { return reduce_; }
  std::array<Conv3dLayer<T>, 3>& convs() { return convs_; }
  std::array<BatchNormLayer<T>, 3>& norms() { return norms_; }
  Conv3dLayer<T>& velocity_hidden() { return velocity_hidden_; }
  Conv3dLayer<T>& velocity_out() { return velocity_out_; }

 private:
  DenseBlock<T> reduce_;
  std::array<Conv3dLayer<T>, 3> convs_;
  std::array<BatchNormLayer<T>, 3> norms_;
  Conv3dLayer<T> velocity_hidden_;
  Conv3dLayer<T> velocity_out_;
};

extern template class AdvectionStep<float>;
extern template class AdvectionStep<double>;

}  // namespace advectant
