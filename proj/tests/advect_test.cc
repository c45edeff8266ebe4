#include "advectant/advect.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <random>
#include <vector>

#include "advectant/ops.h"
#include "oracles.h"
#include "test_support.h"

namespace advectant {
namespace {

using test_support::InteriorPositions;
using test_support::RandomTensor;

AdvectionParams SmallParams() {
  AdvectionParams p;
  p.reduce_width = 8;
  p.conv_widths = {8, 4, 8};
  p.velocity_hidden = 4;
  return p;
}

void Fill(Tensor<double>& t, double v) { std::fill(t.data().begin(), t.data().end(), v); }

GridField<double> NodeField(const GridSpec& spec, std::vector<double> values) {
  const int n = spec.resolution;
  return GridField<double>{spec, Tensor<double>(Shape{3, n, n, n}, std::move(values))};
}

ParticleSystem<double> RandomSystem(int64_t b, int64_t p, int64_t width, const GridSpec& spec,
                                    std::mt19937_64& rng) {
  ParticleSystem<double> s;
  s.positions = InteriorPositions({b, p, 3}, spec, rng);
  s.velocities = RandomTensor({b, p, 3}, rng, -0.3, 0.3);
  s.masses = Tensor<double>(Shape{b, p}, 1.0);
  s.features = RandomTensor({b, p, width}, rng);
  return s;
}

TEST(AdvectionParams, Validation) {
  AdvectionParams p;
  EXPECT_NO_THROW(p.Validate());
  EXPECT_DOUBLE_EQ(p.dt(), 0.5);
  p.alpha = 1.5;
  EXPECT_THROW(p.Validate(), ContractError);
  p.alpha = 0.5;
  p.total_time = 0;
  EXPECT_THROW(p.Validate(), ContractError);
  p.steps = 0;
  EXPECT_NO_THROW(p.Validate());
  EXPECT_EQ(p.dt(), 0.0);
}

TEST(ParticleSystem, StartsAtRestWithUnitMasses) {
  auto s = ParticleSystem<double>::AtRest(Tensor<double>(Shape{2, 5, 3}, 0.1),
                                          Tensor<double>(Shape{2, 5, 4}));
  for (double v : s.velocities.data()) EXPECT_EQ(v, 0.0);
  for (double m : s.masses.data()) EXPECT_EQ(m, 1.0);
  EXPECT_EQ(s.batch(), 2);
  EXPECT_EQ(s.particles(), 5);
  EXPECT_EQ(s.feature_width(), 4);
}

TEST(PicFlip, PureBlendReturnsPicExactly) {
  std::mt19937_64 rng(1);
  const GridSpec spec{4, 1.0};
  Tensor<double> x = RandomTensor({9, 3}, rng, -1, 1, false);
  Tensor<double> v = RandomTensor({9, 3}, rng, -1, 1, false);
  GridField<double> grid{spec, RandomTensor({3, 4, 4, 4}, rng, -1, 1, false)};
  const auto out = PicFlip(v, grid, x, Tensor<double>(Shape{9}, 1.0), 1.0);
  const auto pic = G2P(grid, x);
  for (int64_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], pic[i]);
}

TEST(PicFlip, ZeroGridVelocityWithPureBlendStopsParticles) {
  std::mt19937_64 rng(2);
  const GridSpec spec{4, 1.0};
  Tensor<double> x = RandomTensor({9, 3}, rng, -1, 1, false);
  Tensor<double> v = RandomTensor({9, 3}, rng, -5, 5, false);
  GridField<double> zero{spec, Tensor<double>(Shape{3, 4, 4, 4})};
  const auto out = PicFlip(v, zero, x, Tensor<double>(Shape{9}, 1.0), 1.0);
  for (double u : out.data()) EXPECT_EQ(u, 0.0);
}

TEST(PicFlip, ZeroBlendIsFlip) {
  std::mt19937_64 rng(3);
  const GridSpec spec{4, 1.0};
  Tensor<double> x = RandomTensor({9, 3}, rng, -1, 1, false);
  Tensor<double> v = RandomTensor({9, 3}, rng, -1, 1, false);
  Tensor<double> m(Shape{9}, 1.0);
  GridField<double> grid{spec, RandomTensor({3, 4, 4, 4}, rng, -1, 1, false)};
  const auto out = PicFlip(v, grid, x, m, 0.0);
  const auto transferred = P2G(v, x, m, spec);
  const auto flip =
      Add(v, G2P(GridField<double>{spec, Sub(grid.values, transferred.values)}, x));
  for (int64_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], flip[i]);
}

TEST(PicFlip, LoneParticleOnNodeIsAFixedPoint) {
  const GridSpec spec{4, 1.0};
  const auto node = spec.NodePosition(1, 2, 1);
  Tensor<double> x(Shape{1, 3}, {node[0], node[1], node[2]});
  Tensor<double> v(Shape{1, 3}, {0.3, -1.2, 0.7});
  Tensor<double> m(Shape{1}, 1.0);
  const auto grid = P2G(v, x, m, spec);
  for (double alpha : {0.0, 0.25, 0.5, 1.0}) {
    const auto out = PicFlip(v, grid, x, m, alpha);
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(out[a], v[a], 1e-15);
  }
}

TEST(PicFlip, HalfBlendAveragesPicAndFlip) {
  // Two coincident particles on a node with x-velocities 4 and 0 against a
  // grid velocity of 2: PIC gives 2 for both, FLIP keeps 4 and 0.
  const GridSpec spec{3, 1.0};
  Tensor<double> x(Shape{2, 3}, 0.0);
  Tensor<double> v(Shape{2, 3}, {4, 0, 0, 0, 0, 0});
  std::vector<double> g(3 * 27, 0.0);
  g[spec.NodeIndex(1, 1, 1)] = 2.0;
  const auto grid = NodeField(spec, g);
  Tensor<double> m(Shape{2}, 1.0);
  EXPECT_NEAR(PicFlip(v, grid, x, m, 1.0)[0], 2.0, 1e-15);
  EXPECT_NEAR(PicFlip(v, grid, x, m, 0.0)[0], 4.0, 1e-15);
  const auto half = PicFlip(v, grid, x, m, 0.5);
  EXPECT_NEAR(half[0], 3.0, 1e-15);
  EXPECT_NEAR(half[3], 1.0, 1e-15);
}

TEST(PicFlip, MatchesScalarOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const GridSpec spec{trial % 2 ? 4 : 8, 1.0};
    const int n = spec.resolution;
    const int64_t count = 1 + static_cast<int64_t>(rng() % 40);
    Tensor<double> x = RandomTensor({count, 3}, rng, -1, 1, false);
    Tensor<double> v = RandomTensor({count, 3}, rng, -1, 1, false);
    Tensor<double> m = RandomTensor({count}, rng, 0.5, 2, false);
    Tensor<double> g = RandomTensor({3, n, n, n}, rng, -1, 1, false);
    const double alpha = std::uniform_real_distribution<double>(0, 1)(rng);
    const auto expected =
        oracles::OraclePicFlip(v, {g.data().begin(), g.data().end()}, x,
                               {m.data().begin(), m.data().end()}, spec, alpha);
    const auto out = PicFlip(v, GridField<double>{spec, g}, x, m, alpha);
    for (size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out[i], expected[i], 1e-12);
  }
}

TEST(PicFlip, AffineInAlpha) {
  std::mt19937_64 rng(7);
  const GridSpec spec{4, 1.0};
  Tensor<double> x = RandomTensor({12, 3}, rng, -1, 1, false);
  Tensor<double> v = RandomTensor({12, 3}, rng, -1, 1, false);
  Tensor<double> m(Shape{12}, 1.0);
  GridField<double> grid{spec, RandomTensor({3, 4, 4, 4}, rng, -1, 1, false)};
  const auto r0 = PicFlip(v, grid, x, m, 0.0);
  const auto r1 = PicFlip(v, grid, x, m, 1.0);
  for (double alpha : {0.1, 0.5, 0.9}) {
    const auto r = PicFlip(v, grid, x, m, alpha);
    for (int64_t i = 0; i < r.numel(); ++i) {
      EXPECT_NEAR(r[i], r0[i] + alpha * (r1[i] - r0[i]), 1e-12);
    }
  }
  EXPECT_THROW(PicFlip(v, grid, x, m, 1.5), ContractError);
}

TEST(Integrate, ExplicitEuler) {
  Tensor<double> x(Shape{1, 3}, {0.2, -0.1, 0.0});
  Tensor<double> v(Shape{1, 3}, {1.0, 0.0, -2.0});
  const auto y = Integrate(x, v, 0.5);
  EXPECT_NEAR(y[0], 0.7, 1e-15);
  EXPECT_NEAR(y[1], -0.1, 1e-15);
  EXPECT_NEAR(y[2], -1.0, 1e-15);
  const auto still = Integrate(x, Tensor<double>(Shape{1, 3}), 0.5);
  for (int a = 0; a < 3; ++a) EXPECT_EQ(still[a], x[a]);
  const auto twice = Integrate(Integrate(x, v, 0.25), v, 0.25);
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(twice[a], y[a], 1e-15);
}

TEST(ForceField, ZeroInputGivesZeroOutputInEval) {
  std::mt19937_64 rng(11);
  AdvectionParams params;
  AdvectionStep<double> step(64, params, rng);
  for (auto& c : step.convs()) Fill(c.bias, 0.0);
  for (auto& n : step.norms()) {
    std::fill(n.stats.running_mean.begin(), n.stats.running_mean.end(), 0.0);
    std::fill(n.stats.running_var.begin(), n.stats.running_var.end(), 0.0);
  }
  const GridSpec spec{4, 1.0};
  ForwardContext<double> eval;
  const auto out = step.ForceField(GridField<double>{spec, Tensor<double>(Shape{32, 4, 4, 4})},
                                   eval);
  ASSERT_EQ(out.values.shape(), (Shape{32, 4, 4, 4}));
  for (double v : out.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(ForceField, ShapeAndEvalDeterminism) {
  std::mt19937_64 rng(13);
  AdvectionParams params;
  AdvectionStep<double> step(64, params, rng);
  const GridSpec spec{4, 1.0};
  GridField<double> in{spec, RandomTensor({2, 32, 4, 4, 4}, rng, -1, 1, false)};
  ForwardContext<double> eval;
  const auto a = step.ForceField(in, eval);
  const auto b = step.ForceField(in, eval);
  ASSERT_EQ(a.values.shape(), (Shape{2, 32, 4, 4, 4}));
  for (int64_t i = 0; i < a.values.numel(); ++i) {
    EXPECT_EQ(a.values[i], b.values[i]);
    EXPECT_GE(a.values[i], 0.0);
  }
  EXPECT_THROW(step.ForceField(GridField<double>{spec, Tensor<double>(Shape{16, 4, 4, 4})}, eval),
               DimensionError);
}

TEST(VelocityField, ZeroWeightsGiveZeroField) {
  std::mt19937_64 rng(17);
  AdvectionParams params;
  AdvectionStep<double> step(64, params, rng);
  Fill(step.velocity_out().weight, 0.0);
  Fill(step.velocity_out().bias, 0.0);
  const GridSpec spec{4, 1.0};
  const auto v =
      step.VelocityField(GridField<double>{spec, RandomTensor({32, 4, 4, 4}, rng, -1, 1, false)});
  ASSERT_EQ(v.values.shape(), (Shape{3, 4, 4, 4}));
  for (double x : v.values.data()) EXPECT_EQ(x, 0.0);
}

TEST(VelocityField, IsLocalPerNode) {
  std::mt19937_64 rng(19);
  AdvectionParams params;
  AdvectionStep<double> step(64, params, rng);
  const GridSpec spec{4, 1.0};
  Tensor<double> f = RandomTensor({32, 4, 4, 4}, rng, 0, 1, false);
  const auto before = step.VelocityField(GridField<double>{spec, f});
  Tensor<double> g = f.Clone();
  const int64_t node = spec.NodeIndex(2, 1, 3);
  for (int c = 0; c < 32; ++c) g[c * 64 + node] += 0.5 + c;
  const auto after = step.VelocityField(GridField<double>{spec, g});
  int changed = 0;
  for (int c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < 64; ++i) {
      if (i == node) {
        changed += before.values[c * 64 + i] != after.values[c * 64 + i];
      } else {
        EXPECT_EQ(before.values[c * 64 + i], after.values[c * 64 + i]);
      }
    }
  }
  EXPECT_GT(changed, 0);
}

TEST(AdvectionStep, FeatureWidthGrowsBySixtyFour) {
  std::mt19937_64 rng(23);
  AdvectionParams params;
  const GridSpec spec{4, 1.0};
  AdvectionStep<double> first(64, params, rng);
  AdvectionStep<double> second(first.out_width(), params, rng);
  EXPECT_EQ(first.out_width(), 128);
  EXPECT_EQ(second.out_width(), 192);
  ParticleSystem<double> s = RandomSystem(2, 10, 64, spec, rng);
  ForwardContext<double> ctx;
  ctx.training = true;
  const auto s1 = first.Forward(s, spec, params, ctx);
  const auto s2 = second.Forward(s1, spec, params, ctx);
  EXPECT_EQ(s1.features.shape(), (Shape{2, 10, 128}));
  EXPECT_EQ(s2.features.shape(), (Shape{2, 10, 192}));
  // The original features are carried through unchanged.
  for (int64_t p = 0; p < 20; ++p) {
    for (int k = 0; k < 64; ++k) EXPECT_EQ(s2.features[p * 192 + k], s.features[p * 64 + k]);
  }
  EXPECT_THROW(second.Forward(s, spec, params, ctx), DimensionError);
}

TEST(AdvectionStep, ZeroVelocityHeadLeavesRestingParticlesInPlace) {
  std::mt19937_64 rng(29);
  AdvectionParams params;
  const GridSpec spec{4, 1.0};
  AdvectionStep<double> step(64, params, rng);
  Fill(step.velocity_out().weight, 0.0);
  Fill(step.velocity_out().bias, 0.0);
  ParticleSystem<double> s = RandomSystem(1, 12, 64, spec, rng);
  Fill(s.velocities, 0.0);
  ForwardContext<double> ctx;
  ctx.training = true;
  for (double alpha : {0.0, 0.5, 1.0}) {
    params.alpha = alpha;
    const auto next = step.Forward(s, spec, params, ctx);
    for (int64_t i = 0; i < s.positions.numel(); ++i) {
      EXPECT_EQ(next.positions[i], s.positions[i]);
    }
    EXPECT_EQ(next.features.shape()[2], 128);
  }
}

TEST(AdvectionStep, MassesUnchangedAndZeroTimeStepKeepsPositions) {
  std::mt19937_64 rng(31);
  AdvectionParams params = SmallParams();
  const GridSpec spec{4, 1.0};
  AdvectionStep<double> step(6, params, rng);
  ParticleSystem<double> s = RandomSystem(2, 8, 6, spec, rng);
  ForwardContext<double> ctx;
  ctx.training = true;
  const auto moved = step.Forward(s, spec, params, ctx);
  for (int64_t i = 0; i < s.masses.numel(); ++i) EXPECT_EQ(moved.masses[i], s.masses[i]);
  bool any_moved = false;
  for (int64_t i = 0; i < s.positions.numel(); ++i) {
    any_moved |= moved.positions[i] != s.positions[i];
  }
  EXPECT_TRUE(any_moved);
  params.total_time = 0;
  const auto frozen = step.Forward(s, spec, params, ctx);
  for (int64_t i = 0; i < s.positions.numel(); ++i) {
    EXPECT_EQ(frozen.positions[i], s.positions[i]);
  }
  EXPECT_EQ(frozen.features.shape()[2], 6 + 8 + 8);
}

TEST(AdvectionStep, PermutationEquivariant) {
  std::mt19937_64 rng(37);
  AdvectionParams params = SmallParams();
  const GridSpec spec{4, 1.0};
  AdvectionStep<double> step(5, params, rng);
  ParticleSystem<double> s = RandomSystem(1, 14, 5, spec, rng);
  std::vector<int64_t> perm(14);
  for (int i = 0; i < 14; ++i) perm[i] = (i * 3 + 5) % 14;
  ParticleSystem<double> t;
  t.positions = GatherParticles(s.positions, perm);
  t.velocities = GatherParticles(s.velocities, perm);
  t.masses = s.masses;
  t.features = GatherParticles(s.features, perm);
  ForwardContext<double> ctx;
  ctx.training = true;
  const auto a = step.Forward(s, spec, params, ctx);
  const auto b = step.Forward(t, spec, params, ctx);
  const auto a_perm_x = GatherParticles(a.positions, perm);
  const auto a_perm_v = GatherParticles(a.velocities, perm);
  const auto a_perm_f = GatherParticles(a.features, perm);
  for (int64_t i = 0; i < b.positions.numel(); ++i) {
    EXPECT_NEAR(b.positions[i], a_perm_x[i], 1e-12);
    EXPECT_NEAR(b.velocities[i], a_perm_v[i], 1e-12);
  }
  for (int64_t i = 0; i < b.features.numel(); ++i) EXPECT_NEAR(b.features[i], a_perm_f[i], 1e-12);
}

TEST(AdvectionStep, SinkReceivesStepState) {
  std::mt19937_64 rng(41);
  AdvectionParams params = SmallParams();
  const GridSpec spec{4, 1.0};
  AdvectionStep<double> step(5, params, rng);
  ParticleSystem<double> s = RandomSystem(1, 6, 5, spec, rng);
  ForwardContext<double> ctx;
  int calls = 0;
  const auto next = step.Forward(s, spec, params, ctx, 3, [&](const StepTrace<double>& t) {
    ++calls;
    EXPECT_EQ(t.step, 4);
    EXPECT_EQ(t.grid_velocity.values.shape(), (Shape{1, 3, 4, 4, 4}));
    EXPECT_EQ(t.previous_positions.data()[0], s.positions[0]);
    // The recorded velocity is the blend of the recorded fields.
    const auto blend = PicFlip(t.previous_velocities, t.grid_velocity, t.previous_positions,
                               t.masses, 0.5);
    for (int64_t i = 0; i < blend.numel(); ++i) EXPECT_EQ(blend[i], t.velocities[i]);
  });
  EXPECT_EQ(calls, 1);
}

TEST(AdvectionStep, GradientsMatchFiniteDifferences) {
  const auto start = std::chrono::steady_clock::now();
  const auto r = test_support::CheckAdvectionStepGradients(
      2024, test_support::ToyAdvectionParams());
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 10000);
  EXPECT_LT(seconds, 60.0);
}

}  // namespace
}  // namespace advectant
