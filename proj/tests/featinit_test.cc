#include "advectant/featinit.h"

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "test_support.h"

namespace advectant {
namespace {

using test_support::RandomTensor;

Tensor<double> Cloud(std::vector<std::array<double, 3>> rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return Tensor<double>(Shape{static_cast<int64_t>(rows.size()), 3}, std::move(v));
}

// Brute-force descriptor: for each particle and scale, average every
// particle that lands in the same cell.
std::vector<double> OracleDescriptor(const Tensor<double>& x) {
  const int64_t count = x.shape()[0];
  std::vector<double> out(count * kDescriptorWidth, 0.0);
  auto cell = [](double v, int n) {
    return std::clamp(static_cast<int>(std::floor((v + 1.0) / 2.0 * n)), 0, n - 1);
  };
  for (size_t s = 0; s < kDescriptorScales.size(); ++s) {
    const int n = kDescriptorScales[s];
    for (int64_t p = 0; p < count; ++p) {
      std::array<double, 3> center{};
      int members = 0;
      for (int64_t q = 0; q < count; ++q) {
        bool same = true;
        for (int a = 0; a < 3; ++a) same &= cell(x[3 * p + a], n) == cell(x[3 * q + a], n);
        if (!same) continue;
        ++members;
        for (int a = 0; a < 3; ++a) center[a] += x[3 * q + a];
      }
      double norm = 0;
      std::array<double, 3> d{};
      for (int a = 0; a < 3; ++a) {
        center[a] /= members;
        d[a] = center[a] - x[3 * p + a];
        norm += d[a] * d[a];
      }
      norm = std::sqrt(norm);
      double* row = &out[p * kDescriptorWidth + 6 * s];
      for (int a = 0; a < 3; ++a) {
        row[a] = center[a];
        row[3 + a] = norm < 1e-8 ? 0.0 : d[a] / norm;
      }
    }
  }
  return out;
}

TEST(Descriptor, WidthIsSixPerScale) {
  EXPECT_EQ(kDescriptorWidth, 36);
  std::mt19937_64 rng(1);
  const auto d = MultiscaleDescriptor(RandomTensor({7, 3}, rng, -1, 1, false));
  EXPECT_EQ(d.shape(), (Shape{7, 36}));
  EXPECT_FALSE(d.requires_grad());
}

TEST(Descriptor, SingleParticleIsItsOwnCenter) {
  const auto d = MultiscaleDescriptor(Cloud({{0.3, -0.7, 0.9}}));
  for (size_t s = 0; s < kDescriptorScales.size(); ++s) {
    EXPECT_EQ(d[6 * s + 0], 0.3);
    EXPECT_EQ(d[6 * s + 1], -0.7);
    EXPECT_EQ(d[6 * s + 2], 0.9);
    for (int a = 3; a < 6; ++a) EXPECT_EQ(d[6 * s + a], 0.0);
  }
}

TEST(Descriptor, ParticlesInDifferentCoarseCells) {
  const auto d = MultiscaleDescriptor(Cloud({{-0.5, 0, 0}, {0.5, 0, 0}}));
  EXPECT_EQ(d[0], -0.5);
  EXPECT_EQ(d[36], 0.5);
  for (int a = 3; a < 6; ++a) {
    EXPECT_EQ(d[a], 0.0);
    EXPECT_EQ(d[36 + a], 0.0);
  }
}

TEST(Descriptor, ParticlesSharingACoarseCell) {
  const auto d = MultiscaleDescriptor(Cloud({{0.1, 0, 0}, {0.3, 0, 0}}));
  EXPECT_NEAR(d[0], 0.2, 1e-12);
  EXPECT_EQ(d[1], 0.0);
  EXPECT_NEAR(d[3], 1.0, 1e-12);
  EXPECT_NEAR(d[36 + 0], 0.2, 1e-12);
  EXPECT_NEAR(d[36 + 3], -1.0, 1e-12);
  EXPECT_EQ(d[4], 0.0);
  EXPECT_EQ(d[5], 0.0);
}

TEST(Descriptor, CellOwnership) {
  EXPECT_EQ(DescriptorCell(-1.0, 2, 1.0), 0);
  EXPECT_EQ(DescriptorCell(0.0, 2, 1.0), 1);
  EXPECT_EQ(DescriptorCell(1.0, 2, 1.0), 1);
  EXPECT_EQ(DescriptorCell(1.0, 12, 1.0), 11);
  EXPECT_EQ(DescriptorCell(-0.999, 12, 1.0), 0);
  EXPECT_EQ(DescriptorCell(1.5, 4, 1.0), 3);
  EXPECT_EQ(DescriptorCell(-1.5, 4, 1.0), 0);
}

TEST(Descriptor, MatchesBruteForceOracle) {
  std::mt19937_64 rng(7);
  for (int64_t count : {1, 5, 40, 200}) {
    Tensor<double> x = RandomTensor({count, 3}, rng, -1, 1, false);
    const auto expected = OracleDescriptor(x);
    const auto d = MultiscaleDescriptor(x);
    for (size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(d[i], expected[i], 1e-12);
  }
}

TEST(Descriptor, DirectionNormsAreZeroOrOne) {
  std::mt19937_64 rng(9);
  Tensor<float> x(Shape{300, 3});
  std::uniform_real_distribution<float> u(-1, 1);
  for (float& v : x.data()) v = u(rng);
  const auto d = MultiscaleDescriptor(x);
  int zeros = 0;
  for (int64_t p = 0; p < 300; ++p) {
    for (size_t s = 0; s < kDescriptorScales.size(); ++s) {
      const float* dir = &d[p * 36 + 6 * s + 3];
      const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      if (n == 0.0) {
        ++zeros;
      } else {
        EXPECT_NEAR(n, 1.0, 1e-5);
      }
    }
  }
  EXPECT_GT(zeros, 0);
}

TEST(Descriptor, PermutationEquivariant) {
  std::mt19937_64 rng(13);
  Tensor<double> x = RandomTensor({25, 3}, rng, -1, 1, false);
  std::vector<int> perm(25);
  for (int i = 0; i < 25; ++i) perm[i] = (i * 7 + 3) % 25;
  Tensor<double> y(Shape{25, 3});
  for (int i = 0; i < 25; ++i) {
    for (int a = 0; a < 3; ++a) y[3 * i + a] = x[3 * perm[i] + a];
  }
  const auto dx = MultiscaleDescriptor(x);
  const auto dy = MultiscaleDescriptor(y);
  for (int i = 0; i < 25; ++i) {
    for (int k = 0; k < 36; ++k) EXPECT_NEAR(dy[36 * i + k], dx[36 * perm[i] + k], 1e-14);
  }
}

TEST(Descriptor, TranslationShiftsCentersOnly) {
  // Points placed inside cells of the finest common grid so a small shift
  // keeps every cell assignment. Cell edges at all scales lie on multiples
  // of 1/60 of the domain width; keeping points away from them by more than
  // the shift preserves assignments.
  std::mt19937_64 rng(19);
  const double delta[3] = {0.004, -0.003, 0.002};
  std::vector<std::array<double, 3>> rows;
  std::uniform_int_distribution<int> cell(0, 59);
  std::uniform_real_distribution<double> inside(0.3, 0.7);
  for (int i = 0; i < 60; ++i) {
    std::array<double, 3> r{};
    for (int a = 0; a < 3; ++a) r[a] = -1.0 + (cell(rng) + inside(rng)) * (2.0 / 60);
    rows.push_back(r);
  }
  Tensor<double> x = Cloud(rows);
  Tensor<double> y = x.Clone();
  for (int i = 0; i < 60; ++i) {
    for (int a = 0; a < 3; ++a) y[3 * i + a] += delta[a];
  }
  const auto dx = MultiscaleDescriptor(x);
  const auto dy = MultiscaleDescriptor(y);
  for (int i = 0; i < 60; ++i) {
    for (size_t s = 0; s < kDescriptorScales.size(); ++s) {
      for (int a = 0; a < 3; ++a) {
        const int64_t c = 36 * i + 6 * s + a;
        EXPECT_NEAR(dy[c], dx[c] + delta[a], 1e-12);
        EXPECT_NEAR(dy[c + 3], dx[c + 3], 1e-9);
      }
    }
  }
}

TEST(Descriptor, BatchEntriesAreIndependent) {
  std::mt19937_64 rng(23);
  Tensor<double> a = RandomTensor({10, 3}, rng, -1, 1, false);
  Tensor<double> b = RandomTensor({10, 3}, rng, -1, 1, false);
  std::vector<double> both(a.data().begin(), a.data().end());
  both.insert(both.end(), b.data().begin(), b.data().end());
  const auto d = MultiscaleDescriptor(Tensor<double>(Shape{2, 10, 3}, both));
  ASSERT_EQ(d.shape(), (Shape{2, 10, 36}));
  const auto da = MultiscaleDescriptor(a);
  const auto db = MultiscaleDescriptor(b);
  for (int i = 0; i < 360; ++i) {
    EXPECT_EQ(d[i], da[i]);
    EXPECT_EQ(d[360 + i], db[i]);
  }
}

TEST(Descriptor, RejectsBadShape) {
  EXPECT_THROW(MultiscaleDescriptor(Tensor<double>(Shape{4, 2})), DimensionError);
}

}  // namespace
}  // namespace advectant
