#include "advectant/transfer.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "advectant/parallel.h"

namespace advectant {

void GridSpec::Validate() const {
  if (resolution < 2) {
    throw ContractError("grid resolution must be at least 2, got " + std::to_string(resolution));
  }
  if (!(half_extent > 0.0)) throw ContractError("grid half extent must be positive");
}

namespace {

constexpr int kCorners = 8;

// Lower cell index, fractional offset and d(offset)/dx along one axis.
template <typename T>
void AxisStencil(T x, const GridSpec& spec, int64_t* lower, T* frac, T* dfrac) {
  const T he = static_cast<T>(spec.half_extent);
  const T h = static_cast<T>(spec.spacing());
  T inv_h = T(1) / h;
  if (x < -he) {
    x = -he;
    inv_h = 0;
  } else if (x > he) {
    x = he;
    inv_h = 0;
  }
  const T u = (x + he) / h;
  int64_t i0 = static_cast<int64_t>(std::floor(u));
  i0 = std::clamp<int64_t>(i0, 0, spec.resolution - 2);
  *lower = i0;
  *frac = std::clamp(u - static_cast<T>(i0), T(0), T(1));
  *dfrac = inv_h;
}

// Batch layout shared by the transfer ops: positions are [P,3] or [B,P,3].
struct BatchLayout {
  bool batched = false;
  int64_t batch = 1;
  int64_t particles = 0;
};

template <typename T>
BatchLayout PositionsLayout(const Tensor<T>& positions) {
  BatchLayout l;
  if (positions.rank() == 2 && positions.shape()[1] == 3) {
    l.particles = positions.shape()[0];
  } else if (positions.rank() == 3 && positions.shape()[2] == 3) {
    l.batched = true;
    l.batch = positions.shape()[0];
    l.particles = positions.shape()[1];
  } else {
    throw DimensionError("positions must be [P,3] or [B,P,3], got " +
                         ShapeToString(positions.shape()));
  }
  return l;
}

template <typename T>
int64_t ParticleChannels(const Tensor<T>& q, const BatchLayout& l, const char* op) {
  const bool ok = l.batched ? (q.rank() == 3 && q.shape()[0] == l.batch &&
                               q.shape()[1] == l.particles)
                            : (q.rank() == 2 && q.shape()[0] == l.particles);
  if (!ok) {
    throw DimensionError(std::string(op) + ": particle tensor " + ShapeToString(q.shape()) +
                         " does not match positions");
  }
  return q.shape()[q.rank() - 1];
}

Shape GridShape(const BatchLayout& l, int64_t channels, const GridSpec& spec) {
  const int64_t n = spec.resolution;
  if (l.batched) return {l.batch, channels, n, n, n};
  return {channels, n, n, n};
}

template <typename T>
std::vector<StencilWeights<T>> BatchStencils(const Tensor<T>& positions, const BatchLayout& l,
                                             const GridSpec& spec) {
  spec.Validate();
  std::vector<StencilWeights<T>> out(l.batch);
  const auto data = positions.data();
  for (int64_t b = 0; b < l.batch; ++b) {
    out[b] = ComputeStencil<T>(data.subspan(b * l.particles * 3, l.particles * 3), spec);
  }
  return out;
}

// Accumulates d(loss)/d(position) given d(loss)/d(weight) per corner.
template <typename T>
void AccumulatePositionGrad(const StencilWeights<T>& st, std::span<const T> dweight,
                            T* dpos) {
  for (int64_t p = 0; p < st.num_particles; ++p) {
    for (int k = 0; k < kCorners; ++k) {
      const T dw = dweight[p * kCorners + k];
      const T* g = st.gradients.data() + (p * kCorners + k) * 3;
      dpos[p * 3 + 0] += dw * g[0];
      dpos[p * 3 + 1] += dw * g[1];
      dpos[p * 3 + 2] += dw * g[2];
    }
  }
}

}  // namespace

template <typename T>
StencilWeights<T> ComputeStencil(std::span<const T> positions, const GridSpec& spec) {
  spec.Validate();
  if (positions.size() % 3 != 0) throw DimensionError("positions must be xyz triples");
  StencilWeights<T> st;
  st.num_particles = static_cast<int64_t>(positions.size() / 3);
  st.nodes.resize(st.num_particles * kCorners);
  st.weights.resize(st.num_particles * kCorners);
  st.gradients.resize(st.num_particles * kCorners * 3);
  for (int64_t p = 0; p < st.num_particles; ++p) {
    int64_t lo[3];
    T t[3];
    T dt[3];
    for (int a = 0; a < 3; ++a) {
      const T x = positions[p * 3 + a];
      if (std::isnan(x)) {
        throw ContractError("NaN particle position at index " + std::to_string(p));
      }
      AxisStencil(x, spec, &lo[a], &t[a], &dt[a]);
    }
    for (int k = 0; k < kCorners; ++k) {
      const int bit[3] = {(k >> 2) & 1, (k >> 1) & 1, k & 1};
      T w[3];
      T dw[3];
      for (int a = 0; a < 3; ++a) {
        w[a] = bit[a] ? t[a] : T(1) - t[a];
        dw[a] = bit[a] ? dt[a] : -dt[a];
      }
      const int64_t idx = p * kCorners + k;
      st.nodes[idx] = spec.NodeIndex(static_cast<int>(lo[0] + bit[0]),
                                     static_cast<int>(lo[1] + bit[1]),
                                     static_cast<int>(lo[2] + bit[2]));
      st.weights[idx] = w[0] * w[1] * w[2];
      st.gradients[idx * 3 + 0] = dw[0] * w[1] * w[2];
      st.gradients[idx * 3 + 1] = w[0] * dw[1] * w[2];
      st.gradients[idx * 3 + 2] = w[0] * w[1] * dw[2];
    }
  }
  return st;
}

template <typename T>
StencilWeights<T> Stencil(const Tensor<T>& positions, const GridSpec& spec) {
  if (positions.rank() != 2 || positions.shape()[1] != 3) {
    throw DimensionError("Stencil expects positions [P,3]");
  }
  return ComputeStencil<T>(positions.data(), spec);
}

template <typename T>
GridField<T> P2GRaw(const Tensor<T>& quantity, const Tensor<T>& positions,
                    const GridSpec& spec) {
  const BatchLayout l = PositionsLayout(positions);
  const int64_t channels = ParticleChannels(quantity, l, "P2GRaw");
  auto stencils = BatchStencils(positions, l, spec);
  const int64_t nodes = spec.num_nodes();
  std::vector<T> out(l.batch * channels * nodes, T(0));
  ParallelFor(l.batch, [&](int64_t b) {
    const StencilWeights<T>& st = stencils[b];
    const T* q = quantity.data().data() + b * l.particles * channels;
    T* grid = out.data() + b * channels * nodes;
    for (int64_t p = 0; p < l.particles; ++p) {
      for (int k = 0; k < kCorners; ++k) {
        const T w = st.weight(p, k);
        if (w == T(0)) continue;
        const int64_t i = st.node(p, k);
        for (int64_t c = 0; c < channels; ++c) grid[c * nodes + i] += w * q[p * channels + c];
      }
    }
  });
  Tensor<T> values = Tensor<T>::MakeResult(
      GridShape(l, channels, spec), std::move(out), {quantity, positions},
      [l, channels, nodes, stencils = std::move(stencils)](TensorNode<T>& self) {
        TensorNode<T>* pq = self.parents[0]->requires_grad ? self.parents[0].get() : nullptr;
        TensorNode<T>* px = self.parents[1]->requires_grad ? self.parents[1].get() : nullptr;
        T* dq = pq ? pq->grad_buffer().data() : nullptr;
        T* dx = px ? px->grad_buffer().data() : nullptr;
        const T* qd = self.parents[0]->data.data();
        ParallelFor(l.batch, [&](int64_t b) {
          const StencilWeights<T>& st = stencils[b];
          const T* g = self.grad.data() + b * channels * nodes;
          const T* q = qd + b * l.particles * channels;
          std::vector<T> dweight(dx ? l.particles * kCorners : 0, T(0));
          for (int64_t p = 0; p < l.particles; ++p) {
            for (int k = 0; k < kCorners; ++k) {
              const int64_t i = st.node(p, k);
              const T w = st.weight(p, k);
              T dw = 0;
              for (int64_t c = 0; c < channels; ++c) {
                const T gi = g[c * nodes + i];
                if (dq) dq[(b * l.particles + p) * channels + c] += w * gi;
                dw += q[p * channels + c] * gi;
              }
              if (dx) dweight[p * kCorners + k] = dw;
            }
          }
          if (dx) AccumulatePositionGrad<T>(st, dweight, dx + b * l.particles * 3);
        });
      });
  return GridField<T>{spec, std::move(values)};
}

template <typename T>
GridField<T> P2G(const Tensor<T>& features, const Tensor<T>& positions, const Tensor<T>& masses,
                 const GridSpec& spec) {
  const BatchLayout l = PositionsLayout(positions);
  const int64_t channels = ParticleChannels(features, l, "P2G");
  if (masses.numel() != l.batch * l.particles) {
    throw DimensionError("P2G: masses " + ShapeToString(masses.shape()) +
                         " do not match positions");
  }
  for (T m : masses.data()) {
    if (!(m > T(0))) throw ContractError("P2G: particle masses must be positive");
  }
  auto stencils = BatchStencils(positions, l, spec);
  const int64_t nodes = spec.num_nodes();
  const T eps = static_cast<T>(kEmptyNodeMass);
  std::vector<T> out(l.batch * channels * nodes, T(0));
  std::vector<T> mass_field(l.batch * nodes, T(0));
  ParallelFor(l.batch, [&](int64_t b) {
    const StencilWeights<T>& st = stencils[b];
    const T* f = features.data().data() + b * l.particles * channels;
    const T* m = masses.data().data() + b * l.particles;
    T* grid = out.data() + b * channels * nodes;
    T* mass = mass_field.data() + b * nodes;
    for (int64_t p = 0; p < l.particles; ++p) {
      for (int k = 0; k < kCorners; ++k) {
        const T wm = st.weight(p, k) * m[p];
        if (wm == T(0)) continue;
        const int64_t i = st.node(p, k);
        mass[i] += wm;
        for (int64_t c = 0; c < channels; ++c) grid[c * nodes + i] += wm * f[p * channels + c];
      }
    }
    for (int64_t i = 0; i < nodes; ++i) {
      const T inv = T(1) / std::max(mass[i], eps);
      for (int64_t c = 0; c < channels; ++c) grid[c * nodes + i] *= inv;
    }
  });
  Tensor<T> values = Tensor<T>::MakeResult(
      GridShape(l, channels, spec), std::move(out), {features, positions, masses},
      [l, channels, nodes, eps, stencils = std::move(stencils),
       mass_field = std::move(mass_field)](TensorNode<T>& self) {
        TensorNode<T>* pf = self.parents[0]->requires_grad ? self.parents[0].get() : nullptr;
        TensorNode<T>* px = self.parents[1]->requires_grad ? self.parents[1].get() : nullptr;
        T* df = pf ? pf->grad_buffer().data() : nullptr;
        T* dx = px ? px->grad_buffer().data() : nullptr;
        const T* fd = self.parents[0]->data.data();
        const T* md = self.parents[2]->data.data();
        ParallelFor(l.batch, [&](int64_t b) {
          const StencilWeights<T>& st = stencils[b];
          const T* g = self.grad.data() + b * channels * nodes;
          const T* value = self.data.data() + b * channels * nodes;
          const T* mass = mass_field.data() + b * nodes;
          // out = num / max(mass, eps): split the incoming grad into the
          // numerator part and the (guarded) denominator part.
          std::vector<T> dnum(channels * nodes);
          std::vector<T> dden(nodes, T(0));
          for (int64_t i = 0; i < nodes; ++i) {
            const bool guarded = mass[i] <= eps;
            const T inv = T(1) / (guarded ? eps : mass[i]);
            T acc = 0;
            for (int64_t c = 0; c < channels; ++c) {
              dnum[c * nodes + i] = g[c * nodes + i] * inv;
              acc += g[c * nodes + i] * value[c * nodes + i];
            }
            if (!guarded) dden[i] = -acc * inv;
          }
          const T* f = fd + b * l.particles * channels;
          const T* m = md + b * l.particles;
          std::vector<T> dweight(dx ? l.particles * kCorners : 0, T(0));
          for (int64_t p = 0; p < l.particles; ++p) {
            for (int k = 0; k < kCorners; ++k) {
              const int64_t i = st.node(p, k);
              const T wm = st.weight(p, k) * m[p];
              T dw = dden[i];
              for (int64_t c = 0; c < channels; ++c) {
                const T dn = dnum[c * nodes + i];
                if (df) df[(b * l.particles + p) * channels + c] += wm * dn;
                dw += f[p * channels + c] * dn;
              }
              if (dx) dweight[p * kCorners + k] = dw * m[p];
            }
          }
          if (dx) AccumulatePositionGrad<T>(st, dweight, dx + b * l.particles * 3);
        });
      });
  return GridField<T>{spec, std::move(values)};
}

template <typename T>
Tensor<T> G2P(const GridField<T>& field, const Tensor<T>& positions) {
  const BatchLayout l = PositionsLayout(positions);
  const GridSpec& spec = field.spec;
  const int64_t n = spec.resolution;
  const Tensor<T>& values = field.values;
  const int grid_rank = l.batched ? 5 : 4;
  if (values.rank() != grid_rank || (l.batched && values.shape()[0] != l.batch) ||
      values.shape()[grid_rank - 3] != n || values.shape()[grid_rank - 2] != n ||
      values.shape()[grid_rank - 1] != n) {
    throw DimensionError("G2P: field " + ShapeToString(values.shape()) +
                         " does not match positions " + ShapeToString(positions.shape()) +
                         " on a " + std::to_string(n) + "^3 grid");
  }
  const int64_t channels = values.shape()[grid_rank - 4];
  const int64_t nodes = spec.num_nodes();
  auto stencils = BatchStencils(positions, l, spec);
  std::vector<T> out(l.batch * l.particles * channels, T(0));
  ParallelFor(l.batch, [&](int64_t b) {
    const StencilWeights<T>& st = stencils[b];
    const T* grid = values.data().data() + b * channels * nodes;
    T* f = out.data() + b * l.particles * channels;
    for (int64_t p = 0; p < l.particles; ++p) {
      for (int k = 0; k < kCorners; ++k) {
        const T w = st.weight(p, k);
        if (w == T(0)) continue;
        const int64_t i = st.node(p, k);
        for (int64_t c = 0; c < channels; ++c) f[p * channels + c] += w * grid[c * nodes + i];
      }
    }
  });
  Shape shape = l.batched ? Shape{l.batch, l.particles, channels} : Shape{l.particles, channels};
  return Tensor<T>::MakeResult(
      std::move(shape), std::move(out), {values, positions},
      [l, channels, nodes, stencils = std::move(stencils)](TensorNode<T>& self) {
        TensorNode<T>* pg = self.parents[0]->requires_grad ? self.parents[0].get() : nullptr;
        TensorNode<T>* px = self.parents[1]->requires_grad ? self.parents[1].get() : nullptr;
        T* dg = pg ? pg->grad_buffer().data() : nullptr;
        T* dx = px ? px->grad_buffer().data() : nullptr;
        const T* gd = self.parents[0]->data.data();
        ParallelFor(l.batch, [&](int64_t b) {
          const StencilWeights<T>& st = stencils[b];
          const T* grid = gd + b * channels * nodes;
          const T* dout = self.grad.data() + b * l.particles * channels;
          std::vector<T> dweight(dx ? l.particles * kCorners : 0, T(0));
          for (int64_t p = 0; p < l.particles; ++p) {
            for (int k = 0; k < kCorners; ++k) {
              const int64_t i = st.node(p, k);
              const T w = st.weight(p, k);
              T dw = 0;
              for (int64_t c = 0; c < channels; ++c) {
                const T d = dout[p * channels + c];
                if (dg) dg[(b * channels + c) * nodes + i] += w * d;
                dw += d * grid[c * nodes + i];
              }
              if (dx) dweight[p * kCorners + k] = dw;
            }
          }
          if (dx) AccumulatePositionGrad<T>(st, dweight, dx + b * l.particles * 3);
        });
      });
}

#define ADVECTANT_INSTANTIATE_TRANSFER(T)                                                  \
  template StencilWeights<T> ComputeStencil(std::span<const T>, const GridSpec&);          \
  template StencilWeights<T> Stencil(const Tensor<T>&, const GridSpec&);                   \
  template GridField<T> P2G(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                            const GridSpec&);                                              \
  template GridField<T> P2GRaw(const Tensor<T>&, const Tensor<T>&, const GridSpec&);       \
  template Tensor<T> G2P(const GridField<T>&, const Tensor<T>&);

ADVECTANT_INSTANTIATE_TRANSFER(float)
ADVECTANT_INSTANTIATE_TRANSFER(double)

#undef ADVECTANT_INSTANTIATE_TRANSFER

}  // namespace advectant
