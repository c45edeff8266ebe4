#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "advectant/tensor.h"
#include "advectant/transfer.h"

// Straightforward scalar-loop references for the transfer, advection and
// penalty math. Written independently of the library kernels.
namespace advectant::oracles {

// Reference trilinear stencil: node index -> weight for one particle.
inline std::vector<std::pair<int64_t, double>> OracleStencil(const std::array<double, 3>& x,
                                                      const GridSpec& spec) {
  const int n = spec.resolution;
  const double h = spec.spacing();
  std::array<int, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(x[a], -spec.half_extent, spec.half_extent);
    const double u = (c + spec.half_extent) / h;
    int i = static_cast<int>(std::floor(u));
    i = std::clamp(i, 0, n - 2);
    base[a] = i;
    frac[a] = u - i;
  }
  std::vector<std::pair<int64_t, double>> out;
  for (int dx = 0; dx < 2; ++dx) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dz = 0; dz < 2; ++dz) {
        const double w = (dx ? frac[0] : 1 - frac[0]) * (dy ? frac[1] : 1 - frac[1]) *
                         (dz ? frac[2] : 1 - frac[2]);
        out.emplace_back(spec.NodeIndex(base[0] + dx, base[1] + dy, base[2] + dz), w);
      }
    }
  }
  return out;
}

inline std::array<double, 3> Row(const Tensor<double>& positions, int64_t p) {
  return {positions[3 * p], positions[3 * p + 1], positions[3 * p + 2]};
}

// Field value at each node, for particles carrying one channel.
inline std::vector<double> OracleScatterRaw(const Tensor<double>& q, const Tensor<double>& positions,
                                     const GridSpec& spec, int64_t channels) {
  std::vector<double> grid(channels * spec.num_nodes(), 0.0);
  const int64_t count = positions.shape()[0];
  for (int64_t p = 0; p < count; ++p) {
    for (const auto& [node, w] : OracleStencil(Row(positions, p), spec)) {
      for (int64_t c = 0; c < channels; ++c) {
        grid[c * spec.num_nodes() + node] += w * q[p * channels + c];
      }
    }
  }
  return grid;
}

inline std::vector<double> OracleGather(const std::vector<double>& grid, const Tensor<double>& positions,
                                 const GridSpec& spec, int64_t channels) {
  const int64_t count = positions.shape()[0];
  std::vector<double> out(count * channels, 0.0);
  for (int64_t p = 0; p < count; ++p) {
    for (const auto& [node, w] : OracleStencil(Row(positions, p), spec)) {
      for (int64_t c = 0; c < channels; ++c) {
        out[p * channels + c] += w * grid[c * spec.num_nodes() + node];
      }
    }
  }
  return out;
}

// Mass-weighted normalized scatter of q [P,C].
inline std::vector<double> OracleScatter(const Tensor<double>& q, const std::vector<double>& masses,
                                         const Tensor<double>& positions, const GridSpec& spec,
                                         int64_t channels) {
  const int64_t nodes = spec.num_nodes();
  std::vector<double> num(channels * nodes, 0.0), den(nodes, 0.0);
  const int64_t count = positions.shape()[0];
  for (int64_t p = 0; p < count; ++p) {
    for (const auto& [node, w] : OracleStencil(Row(positions, p), spec)) {
      den[node] += w * masses[p];
      for (int64_t c = 0; c < channels; ++c) {
        num[c * nodes + node] += w * masses[p] * q[p * channels + c];
      }
    }
  }
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t i = 0; i < nodes; ++i) {
      num[c * nodes + i] /= std::max(den[i], kEmptyNodeMass);
    }
  }
  return num;
}

// alpha * I(V) + (1 - alpha) * (v + I(V - I'(v))) for one cloud.
inline std::vector<double> OraclePicFlip(const Tensor<double>& v_old,
                                         const std::vector<double>& grid_velocity,
                                         const Tensor<double>& positions,
                                         const std::vector<double>& masses,
                                         const GridSpec& spec, double alpha) {
  const auto pic = OracleGather(grid_velocity, positions, spec, 3);
  auto increment = OracleScatter(v_old, masses, positions, spec, 3);
  for (size_t i = 0; i < increment.size(); ++i) increment[i] = grid_velocity[i] - increment[i];
  const auto delta = OracleGather(increment, positions, spec, 3);
  std::vector<double> out(pic.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = alpha * pic[i] + (1 - alpha) * (v_old[i] + delta[i]);
  }
  return out;
}

inline double Length(double x, double y, double z) { return std::sqrt(x * x + y * y + z * z); }

inline double OracleBoundary(const std::vector<double>& x) {
  const size_t n = x.size() / 3;
  double total = 0;
  for (size_t p = 0; p < n; ++p) {
    total += std::max(0.0, Length(x[3 * p], x[3 * p + 1], x[3 * p + 2]) - 1.0);
  }
  return total / n;
}

inline std::map<int, std::array<double, 3>> OracleCenters(const std::vector<double>& x,
                                                          const std::vector<int>& labels) {
  std::map<int, std::array<double, 3>> sum;
  std::map<int, int> count;
  for (size_t p = 0; p < labels.size(); ++p) {
    auto& s = sum[labels[p]];
    for (int a = 0; a < 3; ++a) s[a] += x[3 * p + a];
    ++count[labels[p]];
  }
  for (auto& [l, s] : sum) {
    for (double& v : s) v /= count[l];
  }
  return sum;
}

// One cloud.
inline double OracleGatherPenalty(const std::vector<double>& x, const std::vector<int>& labels) {
  const auto c = OracleCenters(x, labels);
  double total = 0;
  for (const auto& [l, cl] : c) {
    for (const auto& [m, cm] : c) {
      if (l == m) continue;
      total += std::max(0.0, 1.0 - Length(cl[0] - cm[0], cl[1] - cm[1], cl[2] - cm[2]));
    }
  }
  return 0.5 * total;
}

// One cloud; sum (not mean) of distances to the own label's center.
inline double OracleDiffusionSum(const std::vector<double>& x, const std::vector<int>& labels) {
  const auto c = OracleCenters(x, labels);
  double total = 0;
  for (size_t p = 0; p < labels.size(); ++p) {
    const auto& cl = c.at(labels[p]);
    total += Length(cl[0] - x[3 * p], cl[1] - x[3 * p + 1], cl[2] - x[3 * p + 2]);
  }
  return total;
}

}  // namespace advectant::oracles
