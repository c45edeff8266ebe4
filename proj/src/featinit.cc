#include "advectant/featinit.h"

#include <algorithm>
#include <cmath>

#include "advectant/parallel.h"

namespace advectant {

namespace {
constexpr double kCoincident = 1e-8;
}  // namespace

int DescriptorCell(double x, int cells, double half_extent) {
  const double u = (x + half_extent) / (2.0 * half_extent) * cells;
  const int idx = static_cast<int>(std::floor(u));
  return std::clamp(idx, 0, cells - 1);
}

template <typename T>
void ComputeDescriptor(std::span<const T> positions, double half_extent, std::span<T> out) {
  const int64_t count = static_cast<int64_t>(positions.size() / 3);
  if (static_cast<int64_t>(out.size()) != count * kDescriptorWidth) {
    throw DimensionError("descriptor output has the wrong length");
  }
  std::vector<int64_t> cell_of(count);
  for (size_t s = 0; s < kDescriptorScales.size(); ++s) {
    const int cells = kDescriptorScales[s];
    const int64_t num_cells = static_cast<int64_t>(cells) * cells * cells;
    std::vector<double> sums(num_cells * 3, 0.0);
    std::vector<int64_t> members(num_cells, 0);
    for (int64_t p = 0; p < count; ++p) {
      int64_t c = 0;
      for (int a = 0; a < 3; ++a) {
        c = c * cells + DescriptorCell(positions[p * 3 + a], cells, half_extent);
      }
      cell_of[p] = c;
      for (int a = 0; a < 3; ++a) sums[c * 3 + a] += positions[p * 3 + a];
      ++members[c];
    }
    for (int64_t p = 0; p < count; ++p) {
      const int64_t c = cell_of[p];
      double center[3];
      double dir[3];
      double norm2 = 0;
      for (int a = 0; a < 3; ++a) {
        center[a] = sums[c * 3 + a] / static_cast<double>(members[c]);
        dir[a] = center[a] - positions[p * 3 + a];
        norm2 += dir[a] * dir[a];
      }
      const double norm = std::sqrt(norm2);
      T* row = out.data() + p * kDescriptorWidth + s * 6;
      for (int a = 0; a < 3; ++a) {
        row[a] = static_cast<T>(center[a]);
        row[3 + a] = norm < kCoincident ? T(0) : static_cast<T>(dir[a] / norm);
      }
    }
  }
}

template <typename T>
Tensor<T> MultiscaleDescriptor(const Tensor<T>& positions, double half_extent) {
  int64_t batch = 1;
  int64_t count = 0;
  Shape shape;
  if (positions.rank() == 2 && positions.shape()[1] == 3) {
    count = positions.shape()[0];
    shape = {count, kDescriptorWidth};
  } else if (positions.rank() == 3 && positions.shape()[2] == 3) {
    batch = positions.shape()[0];
    count = positions.shape()[1];
    shape = {batch, count, kDescriptorWidth};
  } else {
    throw DimensionError("MultiscaleDescriptor: positions must be [P,3] or [B,P,3]");
  }
  Tensor<T> out(shape);
  ParallelFor(batch, [&](int64_t b) {
    ComputeDescriptor<T>(positions.data().subspan(b * count * 3, count * 3), half_extent,
                         out.data().subspan(b * count * kDescriptorWidth,
                                            count * kDescriptorWidth));
  });
  return out;
}

template Tensor<float> MultiscaleDescriptor(const Tensor<float>&, double);
template Tensor<double> MultiscaleDescriptor(const Tensor<double>&, double);
template void ComputeDescriptor(std::span<const float>, double, std::span<float>);
template void ComputeDescriptor(std::span<const double>, double, std::span<double>);

}  // namespace advectant
