#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "advectant/tensor.h"

namespace advectant {

/// Node-centered cubic grid over [-half_extent, half_extent]^3. Corners of the
/// domain coincide with nodes, so the spacing is 2 * half_extent / (N - 1).
/// Node (ix, iy, iz) is stored at flat index (ix * N + iy) * N + iz.
struct GridSpec {
  int resolution = 16;
  double half_extent = 1.0;

  double spacing() const { return 2.0 * half_extent / (resolution - 1); }
  int64_t num_nodes() const {
    return static_cast<int64_t>(resolution) * resolution * resolution;
  }
  int64_t NodeIndex(int ix, int iy, int iz) const {
    return (static_cast<int64_t>(ix) * resolution + iy) * resolution + iz;
  }
  std::array<double, 3> NodePosition(int ix, int iy, int iz) const {
    const double h = spacing();
    return {-half_extent + ix * h, -half_extent + iy * h, -half_extent + iz * h};
  }
  // Throws ContractError unless N >= 2 and the extent is positive.
  void Validate() const;
};

/// Channel vectors stored on grid nodes: values is [C,N,N,N], or
/// [B,C,N,N,N] for a batch of independent grids.
template <typename T>
struct GridField {
  GridSpec spec;
  Tensor<T> values;

  int64_t channels() const { return values.shape()[values.rank() - 4]; }
};

/// Trilinear weights of the 8 corners of the cell containing each particle.
/// Positions outside the domain are clamped for the lookup only; their
/// weight derivatives are zero along clamped axes.
template <typename T>
struct StencilWeights {
  static constexpr int kCorners = 8;

  int64_t num_particles = 0;
  std::vector<int64_t> nodes;  // [P * 8]
  std::vector<T> weights;      // [P * 8]
  std::vector<T> gradients;    // [P * 8 * 3], d weight / d position

  int64_t node(int64_t p, int k) const { return nodes[p * kCorners + k]; }
  T weight(int64_t p, int k) const { return weights[p * kCorners + k]; }
};

/// Computes stencils for `positions` laid out as consecutive xyz triples.
template <typename T>
StencilWeights<T> ComputeStencil(std::span<const T> positions, const GridSpec& spec);

/// positions [P,3].
template <typename T>
StencilWeights<T> Stencil(const Tensor<T>& positions, const GridSpec& spec);

inline constexpr double kEmptyNodeMass = 1e-8;

/// Mass-weighted normalized scatter:
///   G_i = sum_p w_ip m_p f_p / max(sum_p w_ip m_p, 1e-8).
/// features [P,C] / positions [P,3] / masses [P], or with a leading batch
/// axis. Differentiable w.r.t. features and positions; masses are constants.
template <typename T>
GridField<T> P2G(const Tensor<T>& features, const Tensor<T>& positions,
                 const Tensor<T>& masses, const GridSpec& spec);

/// Unnormalized scatter G_i = sum_p w_ip q_p. The transpose of G2P.
template <typename T>
GridField<T> P2GRaw(const Tensor<T>& quantity, const Tensor<T>& positions,
                    const GridSpec& spec);

/// Trilinear gather f_p = sum_i w_ip G_i. Returns [P,C] (or [B,P,C]).
/// Differentiable w.r.t. field values and positions.
template <typename T>
Tensor<T> G2P(const GridField<T>& field, const Tensor<T>& positions);

}  // namespace advectant
