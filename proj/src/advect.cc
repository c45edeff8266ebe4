#include "advectant/advect.h"

#include <string>

#include "advectant/ops.h"

namespace advectant {

void AdvectionParams::Validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in [0,1]");
  if (steps < 0) throw ContractError("advection steps must be non-negative");
  if (steps > 0 && !(total_time > 0.0)) throw ContractError("total time must be positive");
  if (reduce_width < 1 || velocity_hidden < 1) throw ContractError("widths must be positive");
  for (int w : conv_widths) {
    if (w < 1) throw ContractError("conv widths must be positive");
  }
}

template <typename T>
ParticleSystem<T> ParticleSystem<T>::AtRest(Tensor<T> positions, Tensor<T> features) {
  ParticleSystem s;
  const int64_t b = positions.shape()[0];
  const int64_t p = positions.shape()[1];
  s.velocities = Tensor<T>(Shape{b, p, 3}, T(0));
  s.masses = Tensor<T>(Shape{b, p}, T(1));
  s.positions = std::move(positions);
  s.features = std::move(features);
  return s;
}

template <typename T>
Tensor<T> PicFlip(const Tensor<T>& old_velocities, const GridField<T>& grid_velocity,
                  const Tensor<T>& positions, const Tensor<T>& masses, T alpha) {
  if (!(alpha >= T(0) && alpha <= T(1))) throw ContractError("PicFlip: alpha must lie in [0,1]");
  const Tensor<T> pic = G2P(grid_velocity, positions);
  if (alpha == T(1)) return pic;
  const GridField<T> transferred = P2G(old_velocities, positions, masses, grid_velocity.spec);
  const GridField<T> increment{grid_velocity.spec,
                               Sub(grid_velocity.values, transferred.values)};
  const Tensor<T> flip = Add(old_velocities, G2P(increment, positions));
  if (alpha == T(0)) return flip;
  return Add(Scale(pic, alpha), Scale(flip, T(1) - alpha));
}

template <typename T>
Tensor<T> Integrate(const Tensor<T>& positions, const Tensor<T>& velocities, T dt) {
  return Add(positions, Scale(velocities, dt));
}

template <typename T>
AdvectionStep<T>::AdvectionStep(int64_t in_width, const AdvectionParams& params,
                                std::mt19937_64& rng)
    : reduce_(in_width, params.reduce_width, rng) {
  int64_t channels = params.reduce_width;
  for (size_t i = 0; i < convs_.size(); ++i) {
    convs_[i] = Conv3dLayer<T>(channels, params.conv_widths[i], 3, rng);
    norms_[i] = BatchNormLayer<T>(params.conv_widths[i]);
    channels = params.conv_widths[i];
  }
  velocity_hidden_ = Conv3dLayer<T>(channels, params.velocity_hidden, 1, rng);
  velocity_out_ = Conv3dLayer<T>(params.velocity_hidden, 3, 1, rng);
}

template <typename T>
int64_t AdvectionStep<T>::out_width() const {
  return in_width() + reduce_.linear.out_features() + convs_.back().out_channels();
}

template <typename T>
GridField<T> AdvectionStep<T>::ForceField(const GridField<T>& grid_features,
                                          const ForwardContext<T>& ctx) {
  Tensor<T> x = grid_features.values;
  const bool unbatched = x.rank() == 4;
  if (unbatched) x = Reshape(x, {1, x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]});
  if (x.shape()[1] != convs_[0].in_channels()) {
    throw DimensionError("ForceField: expected " + std::to_string(convs_[0].in_channels()) +
                         " channels, got " + ShapeToString(grid_features.values.shape()));
  }
  for (size_t i = 0; i < convs_.size(); ++i) x = Relu(norms_[i](convs_[i](x), ctx));
  if (unbatched) x = Reshape(x, {x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]});
  return GridField<T>{grid_features.spec, std::move(x)};
}

template <typename T>
GridField<T> AdvectionStep<T>::VelocityField(const GridField<T>& force) const {
  Tensor<T> x = force.values;
  const bool unbatched = x.rank() == 4;
  if (unbatched) x = Reshape(x, {1, x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]});
  if (x.shape()[1] != velocity_hidden_.in_channels()) {
    throw DimensionError("VelocityField: channel mismatch for " +
                         ShapeToString(force.values.shape()));
  }
  x = velocity_out_(Relu(velocity_hidden_(x)));
  if (unbatched) x = Reshape(x, {x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]});
  return GridField<T>{force.spec, std::move(x)};
}

template <typename T>
ParticleSystem<T> AdvectionStep<T>::Forward(const ParticleSystem<T>& system,
                                            const GridSpec& spec, const AdvectionParams& params,
                                            const ForwardContext<T>& ctx, int step_index,
                                            const TrajectorySink<T>& sink) {
  if (system.feature_width() != in_width()) {
    throw DimensionError("advection step expects feature width " + std::to_string(in_width()) +
                         ", got " + std::to_string(system.feature_width()));
  }
  const Tensor<T> reduced = PerParticle(reduce_, system.features, ctx);
  const GridField<T> scattered = P2G(reduced, system.positions, system.masses, spec);
  const GridField<T> force = ForceField(scattered, ctx);
  const Tensor<T> gathered = G2P(force, system.positions);
  const GridField<T> grid_velocity = VelocityField(force);
  ParticleSystem<T> next;
  next.masses = system.masses;
  next.velocities = PicFlip(system.velocities, grid_velocity, system.positions, system.masses,
                            static_cast<T>(params.alpha));
  next.positions = Integrate(system.positions, next.velocities, static_cast<T>(params.dt()));
  next.features = Concat<T>({system.features, reduced, gathered}, 2);
  if (sink) {
    sink(StepTrace<T>{step_index + 1, system.positions, system.velocities, system.masses,
                      grid_velocity, next.positions, next.velocities});
  }
  return next;
}

template <typename T>
void AdvectionStep<T>::Collect(const std::string& prefix, ParameterSet<T>& set) {
  reduce_.Collect(prefix + ".reduce", set);
  for (size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].Collect(prefix + ".conv" + std::to_string(i), set);
    norms_[i].Collect(prefix + ".bn" + std::to_string(i), set);
  }
  velocity_hidden_.Collect(prefix + ".velocity0", set);
  velocity_out_.Collect(prefix + ".velocity1", set);
}

template struct ParticleSystem<float>;
template struct ParticleSystem<double>;
template class AdvectionStep<float>;
template class AdvectionStep<double>;
template Tensor<float> PicFlip(const Tensor<float>&, const GridField<float>&,
                               const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> PicFlip(const Tensor<double>&, const GridField<double>&,
                                const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> Integrate(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> Integrate(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace advectant
