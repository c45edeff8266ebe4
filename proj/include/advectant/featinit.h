#pragma once

#include <array>
#include <span>
#include <vector>

#include "advectant/tensor.h"

namespace advectant {

/// Cell counts per axis at which the descriptor is evaluated, coarse to fine.
inline constexpr std::array<int, 6> kDescriptorScales = {2, 4, 6, 8, 10, 12};
inline constexpr int kDescriptorWidth = 6 * static_cast<int>(kDescriptorScales.size());

/// Per-particle multiscale descriptor. For every scale N the domain is cut
/// into N^3 uniform cells; each particle records the center of mass of its
/// cell (3 values) followed by the unit vector from the particle to that
/// center (3 values, zero when the two coincide). Scales are concatenated in
/// ascending order, giving 36 values per particle.
///
/// positions is [P,3] or [B,P,3]; each batch entry is an independent cloud.
/// The result carries no gradient.
template <typename T>
Tensor<T> MultiscaleDescriptor(const Tensor<T>& positions, double half_extent = 1.0);

/// Single-cloud kernel over xyz triples; writes P * 36 values to `out`.
template <typename T>
void ComputeDescriptor(std::span<const T> positions, double half_extent, std::span<T> out);

/// Cell index along one axis at `cells` cells per axis; x at the upper face
/// belongs to the last cell.
int DescriptorCell(double x, int cells, double half_extent);

}  // namespace advectant
