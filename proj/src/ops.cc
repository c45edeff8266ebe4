#include "advectant/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "advectant/parallel.h"

namespace advectant {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void RequireSameShape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + ShapeToString(a) +
                         " vs " + ShapeToString(b));
  }
}

int NormalizeAxis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return axis;
}

// Splits a shape around `axis` into [outer, extent, inner].
struct AxisSplit {
  int64_t outer = 1;
  int64_t extent = 1;
  int64_t inner = 1;
};

AxisSplit SplitAt(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
TensorNode<T>* GradParent(TensorNode<T>& self, size_t i) {
  TensorNode<T>* p = self.parents[i].get();
  return (p && p->requires_grad) ? p : nullptr;
}

}  // namespace

template <typename T>
Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b) {
  RequireSameShape(a.shape(), b.shape(), "Add");
  std::vector<T> out(a.numel());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = ad[i] + bd[i];
  return Tensor<T>::MakeResult(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    for (size_t k = 0; k < 2; ++k) {
      if (TensorNode<T>* p = GradParent(self, k)) {
        auto& g = p->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> Sub(const Tensor<T>& a, const Tensor<T>& b) {
  RequireSameShape(a.shape(), b.shape(), "Sub");
  std::vector<T> out(a.numel());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = ad[i] - bd[i];
  return Tensor<T>::MakeResult(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    if (TensorNode<T>* p = GradParent(self, 0)) {
      auto& g = p->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (TensorNode<T>* p = GradParent(self, 1)) {
      auto& g = p->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> Mul(const Tensor<T>& a, const Tensor<T>& b) {
  RequireSameShape(a.shape(), b.shape(), "Mul");
  std::vector<T> out(a.numel());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = ad[i] * bd[i];
  return Tensor<T>::MakeResult(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    const auto& ad = self.parents[0]->data;
    const auto& bd = self.parents[1]->data;
    if (TensorNode<T>* p = GradParent(self, 0)) {
      auto& g = p->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bd[i];
    }
    if (TensorNode<T>* p = GradParent(self, 1)) {
      auto& g = p->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ad[i];
    }
  });
}

template <typename T>
Tensor<T> Scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  const T* ad = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = ad[i] * factor;
  return Tensor<T>::MakeResult(a.shape(), std::move(out), {a}, [factor](TensorNode<T>& self) {
    if (TensorNode<T>* p = GradParent(self, 0)) {
      auto& g = p->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

template <typename T>
Tensor<T> Relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  return Tensor<T>::MakeResult(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
    if (TensorNode<T>* p = GradParent(self, 0)) {
      T* g = p->grad_buffer().data();
      const T* xd = p->data.data();
      const T* dy = self.grad.data();
      const size_t n = self.grad.size();
      for (size_t i = 0; i < n; ++i) g[i] += xd[i] > T(0) ? dy[i] : T(0);
    }
  });
}

template <typename T>
Tensor<T> Sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return Tensor<T>::MakeResult(Shape{}, {total}, {x}, [](TensorNode<T>& self) {
    if (TensorNode<T>* p = GradParent(self, 0)) {
      for (T& g : p->grad_buffer()) g += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> Mean(const Tensor<T>& x) {
  return Scale(Sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> Reshape(const Tensor<T>& x, Shape shape) {
  if (NumElements(shape) != x.numel()) {
    throw DimensionError("Reshape: cannot view " + ShapeToString(x.shape()) + " as " +
                         ShapeToString(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>::MakeResult(std::move(shape), std::move(out), {x}, [](TensorNode<T>& self) {
    if (TensorNode<T>* p = GradParent(self, 0)) {
      auto& g = p->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> Concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("Concat: no inputs");
  const int rank = parts[0].rank();
  axis = NormalizeAxis(axis, rank);
  Shape shape = parts[0].shape();
  int64_t total = 0;
  std::vector<int64_t> extents;
  for (const Tensor<T>& t : parts) {
    if (t.rank() != rank) throw DimensionError("Concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && t.shape()[i] != shape[i]) {
        throw DimensionError("Concat: shape mismatch " + ShapeToString(t.shape()) + " vs " +
                             ShapeToString(shape));
      }
    }
    extents.push_back(t.shape()[axis]);
    total += t.shape()[axis];
  }
  shape[axis] = total;
  const AxisSplit split = SplitAt(shape, axis);
  std::vector<T> out(NumElements(shape));
  int64_t offset = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const int64_t e = extents[k];
    const auto src = parts[k].data();
    for (int64_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.begin() + o * e * split.inner, e * split.inner,
                  out.begin() + (o * total + offset) * split.inner);
    }
    offset += e;
  }
  return Tensor<T>::MakeResult(
      shape, std::move(out), parts, [split, extents, total](TensorNode<T>& self) {
        int64_t offset = 0;
        for (size_t k = 0; k < extents.size(); ++k) {
          const int64_t e = extents[k];
          if (TensorNode<T>* p = GradParent(self, k)) {
            auto& g = p->grad_buffer();
            for (int64_t o = 0; o < split.outer; ++o) {
              const T* src = self.grad.data() + (o * total + offset) * split.inner;
              T* dst = g.data() + o * e * split.inner;
              for (int64_t i = 0; i < e * split.inner; ++i) dst[i] += src[i];
            }
          }
          offset += e;
        }
      });
}

namespace {

Shape DropAxis(const Shape& shape, int axis) {
  Shape out = shape;
  out.erase(out.begin() + axis);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> ReduceMax(const Tensor<T>& x, int axis) {
  axis = NormalizeAxis(axis, x.rank());
  const AxisSplit s = SplitAt(x.shape(), axis);
  std::vector<T> out(s.outer * s.inner);
  std::vector<int64_t> argmax(out.size(), 0);
  const T* xd = x.data().data();
  for (int64_t o = 0; o < s.outer; ++o) {
    T* best = out.data() + o * s.inner;
    int64_t* arg = argmax.data() + o * s.inner;
    std::copy_n(xd + o * s.extent * s.inner, s.inner, best);
    for (int64_t e = 1; e < s.extent; ++e) {
      const T* line = xd + (o * s.extent + e) * s.inner;
      for (int64_t i = 0; i < s.inner; ++i) {
        // Strict comparison keeps the first maximal index.
        if (line[i] > best[i]) {
          best[i] = line[i];
          arg[i] = e;
        }
      }
    }
  }
  return Tensor<T>::MakeResult(DropAxis(x.shape(), axis), std::move(out), {x},
                               [s, argmax = std::move(argmax)](TensorNode<T>& self) {
                                 if (TensorNode<T>* p = GradParent(self, 0)) {
                                   auto& g = p->grad_buffer();
                                   for (int64_t o = 0; o < s.outer; ++o) {
                                     for (int64_t i = 0; i < s.inner; ++i) {
                                       const int64_t r = o * s.inner + i;
                                       g[(o * s.extent + argmax[r]) * s.inner + i] +=
                                           self.grad[r];
                                     }
                                   }
                                 }
                               });
}

template <typename T>
Tensor<T> ReduceSum(const Tensor<T>& x, int axis) {
  axis = NormalizeAxis(axis, x.rank());
  const AxisSplit s = SplitAt(x.shape(), axis);
  std::vector<T> out(s.outer * s.inner, T(0));
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t e = 0; e < s.extent; ++e) {
      for (int64_t i = 0; i < s.inner; ++i) {
        out[o * s.inner + i] += x[(o * s.extent + e) * s.inner + i];
      }
    }
  }
  return Tensor<T>::MakeResult(DropAxis(x.shape(), axis), std::move(out), {x},
                               [s](TensorNode<T>& self) {
                                 if (TensorNode<T>* p = GradParent(self, 0)) {
                                   auto& g = p->grad_buffer();
                                   for (int64_t o = 0; o < s.outer; ++o) {
                                     for (int64_t e = 0; e < s.extent; ++e) {
                                       for (int64_t i = 0; i < s.inner; ++i) {
                                         g[(o * s.extent + e) * s.inner + i] +=
                                             self.grad[o * s.inner + i];
                                       }
                                     }
                                   }
                                 }
                               });
}

template <typename T>
Tensor<T> ReduceMean(const Tensor<T>& x, int axis) {
  const int a = NormalizeAxis(axis, x.rank());
  return Scale(ReduceSum(x, a), T(1) / static_cast<T>(x.shape()[a]));
}

template <typename T>
Tensor<T> Expand(const Tensor<T>& x, int axis, int64_t count) {
  if (count < 1) throw DimensionError("Expand: count must be positive");
  axis = NormalizeAxis(axis, x.rank() + 1);
  Shape shape = x.shape();
  shape.insert(shape.begin() + axis, count);
  const AxisSplit s = SplitAt(shape, axis);
  std::vector<T> out(NumElements(shape));
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t e = 0; e < s.extent; ++e) {
      std::copy_n(x.data().begin() + o * s.inner, s.inner,
                  out.begin() + (o * s.extent + e) * s.inner);
    }
  }
  return Tensor<T>::MakeResult(std::move(shape), std::move(out), {x}, [s](TensorNode<T>& self) {
    if (TensorNode<T>* p = GradParent(self, 0)) {
      auto& g = p->grad_buffer();
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t e = 0; e < s.extent; ++e) {
          for (int64_t i = 0; i < s.inner; ++i) {
            g[o * s.inner + i] += self.grad[(o * s.extent + e) * s.inner + i];
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> GatherParticles(const Tensor<T>& x, std::span<const int64_t> index) {
  if (x.rank() != 3 || static_cast<int64_t>(index.size()) != x.shape()[0] * x.shape()[1]) {
    throw DimensionError("GatherParticles: expected x[B,P,C] and B*P indices");
  }
  const int64_t batch = x.shape()[0];
  const int64_t count = x.shape()[1];
  const int64_t width = x.shape()[2];
  std::vector<int64_t> idx(index.begin(), index.end());
  for (int64_t i : idx) {
    if (i < 0 || i >= count) throw DimensionError("GatherParticles: index out of range");
  }
  std::vector<T> out(x.numel());
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < count; ++p) {
      std::copy_n(x.data().begin() + (b * count + idx[b * count + p]) * width, width,
                  out.begin() + (b * count + p) * width);
    }
  }
  return Tensor<T>::MakeResult(
      x.shape(), std::move(out), {x}, [batch, count, width, idx = std::move(idx)](TensorNode<T>& self) {
        if (TensorNode<T>* p = GradParent(self, 0)) {
          auto& g = p->grad_buffer();
          for (int64_t b = 0; b < batch; ++b) {
            for (int64_t q = 0; q < count; ++q) {
              const T* src = self.grad.data() + (b * count + q) * width;
              T* dst = g.data() + (b * count + idx[b * count + q]) * width;
              for (int64_t c = 0; c < width; ++c) dst[c] += src[c];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> Linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 ||
      x.shape()[1] != weight.shape()[1] || bias.shape()[0] != weight.shape()[0]) {
    throw DimensionError("Linear: incompatible shapes x" + ShapeToString(x.shape()) + " W" +
                         ShapeToString(weight.shape()) + " b" + ShapeToString(bias.shape()));
  }
  const int64_t rows = x.shape()[0];
  const int64_t in = x.shape()[1];
  const int64_t outc = weight.shape()[0];
  std::vector<T> out(rows * outc);
  MatMap<T> y(out.data(), rows, outc);
  ConstMatMap<T> xm(x.data().data(), rows, in);
  ConstMatMap<T> wm(weight.data().data(), outc, in);
  y.noalias() = xm * wm.transpose();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(bias.data().data(), outc);
  y.rowwise() += bm;
  return Tensor<T>::MakeResult(
      Shape{rows, outc}, std::move(out), {x, weight, bias},
      [rows, in, outc](TensorNode<T>& self) {
        ConstMatMap<T> dy(self.grad.data(), rows, outc);
        if (TensorNode<T>* p = GradParent(self, 0)) {
          MatMap<T> dx(p->grad_buffer().data(), rows, in);
          ConstMatMap<T> wm(self.parents[1]->data.data(), outc, in);
          dx.noalias() += dy * wm;
        }
        if (TensorNode<T>* p = GradParent(self, 1)) {
          MatMap<T> dw(p->grad_buffer().data(), outc, in);
          ConstMatMap<T> xm(self.parents[0]->data.data(), rows, in);
          dw.noalias() += dy.transpose() * xm;
        }
        if (TensorNode<T>* p = GradParent(self, 2)) {
          T* db = p->grad_buffer().data();
          for (int64_t r = 0; r < rows; ++r) {
            const T* line = self.grad.data() + r * outc;
            for (int64_t o = 0; o < outc; ++o) db[o] += line[o];
          }
        }
      });
}

namespace {

struct ConvGeometry {
  int64_t batch, cin, cout, depth, height, width, k, pad;
  int64_t volume() const { return depth * height * width; }
  int64_t rows() const { return cin * k * k * k; }
  int64_t padded_size() const {
    return cin * (depth + 2 * pad) * (height + 2 * pad) * (width + 2 * pad);
  }
};

// Copies x [C,D,H,W] into a zero-bordered [C,D+2p,H+2p,W+2p] volume.
template <typename T>
void PadVolume(const ConvGeometry& g, const T* x, T* padded) {
  const int64_t pd = g.depth + 2 * g.pad, ph = g.height + 2 * g.pad, pw = g.width + 2 * g.pad;
  std::fill_n(padded, g.cin * pd * ph * pw, T(0));
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t z = 0; z < g.depth; ++z) {
      for (int64_t y = 0; y < g.height; ++y) {
        const T* src = x + ((c * g.depth + z) * g.height + y) * g.width;
        T* dst = padded + ((c * pd + z + g.pad) * ph + y + g.pad) * pw + g.pad;
        for (int64_t i = 0; i < g.width; ++i) dst[i] = src[i];
      }
    }
  }
}

// col[(ci,kd,kh,kw), voxel] = x[ci, voxel + offset], zero outside the volume.
template <typename T>
void Im2Col(const ConvGeometry& g, const T* padded, T* col) {
  const int64_t pd = g.depth + 2 * g.pad, ph = g.height + 2 * g.pad, pw = g.width + 2 * g.pad;
  T* dst = col;
  for (int64_t ci = 0; ci < g.cin; ++ci) {
    for (int64_t kd = 0; kd < g.k; ++kd) {
      for (int64_t kh = 0; kh < g.k; ++kh) {
        for (int64_t kw = 0; kw < g.k; ++kw) {
          for (int64_t z = 0; z < g.depth; ++z) {
            for (int64_t y = 0; y < g.height; ++y) {
              const T* src = padded + ((ci * pd + z + kd) * ph + y + kh) * pw + kw;
              for (int64_t i = 0; i < g.width; ++i) dst[i] = src[i];
              dst += g.width;
            }
          }
        }
      }
    }
  }
}

// Adjoint of Im2Col into a padded gradient volume.
template <typename T>
void Col2ImAdd(const ConvGeometry& g, const T* col, T* padded) {
  const int64_t pd = g.depth + 2 * g.pad, ph = g.height + 2 * g.pad, pw = g.width + 2 * g.pad;
  const T* src = col;
  for (int64_t ci = 0; ci < g.cin; ++ci) {
    for (int64_t kd = 0; kd < g.k; ++kd) {
      for (int64_t kh = 0; kh < g.k; ++kh) {
        for (int64_t kw = 0; kw < g.k; ++kw) {
          for (int64_t z = 0; z < g.depth; ++z) {
            for (int64_t y = 0; y < g.height; ++y) {
              T* dst = padded + ((ci * pd + z + kd) * ph + y + kh) * pw + kw;
              for (int64_t i = 0; i < g.width; ++i) dst[i] += src[i];
              src += g.width;
            }
          }
        }
      }
    }
  }
}

// Adds the interior of a padded volume into x [C,D,H,W].
template <typename T>
void UnpadAdd(const ConvGeometry& g, const T* padded, T* x) {
  const int64_t pd = g.depth + 2 * g.pad, ph = g.height + 2 * g.pad, pw = g.width + 2 * g.pad;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t z = 0; z < g.depth; ++z) {
      for (int64_t y = 0; y < g.height; ++y) {
        const T* src = padded + ((c * pd + z + g.pad) * ph + y + g.pad) * pw + g.pad;
        T* dst = x + ((c * g.depth + z) * g.height + y) * g.width;
        for (int64_t i = 0; i < g.width; ++i) dst[i] += src[i];
      }
    }
  }
}

// Per-thread scratch reused across calls; conv buffers are large enough that
// fresh allocations fault in new pages every time.
template <typename T>
T* Scratch(int slot, int64_t size) {
  thread_local std::vector<T> buffers[3];
  std::vector<T>& buf = buffers[slot];
  if (static_cast<int64_t>(buf.size()) < size) buf.resize(size);
  return buf.data();
}

}  // namespace

template <typename T>
Tensor<T> Conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 5 || weight.rank() != 5 || bias.rank() != 1) {
    throw DimensionError("Conv3d: expected x[B,C,D,H,W], weight[O,C,k,k,k], bias[O]");
  }
  ConvGeometry g{x.shape()[0], x.shape()[1], weight.shape()[0], x.shape()[2],
                 x.shape()[3], x.shape()[4], weight.shape()[2], 0};
  g.pad = g.k / 2;
  if (weight.shape()[1] != g.cin || weight.shape()[3] != g.k || weight.shape()[4] != g.k ||
      g.k % 2 == 0 || bias.shape()[0] != g.cout) {
    throw DimensionError("Conv3d: incompatible shapes x" + ShapeToString(x.shape()) + " W" +
                         ShapeToString(weight.shape()) + " b" + ShapeToString(bias.shape()));
  }
  const int64_t vol = g.volume();
  const int64_t rows = g.rows();
  std::vector<T> out(g.batch * g.cout * vol);
  ConstMatMap<T> km(weight.data().data(), g.cout, rows);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bm(bias.data().data(), g.cout);
  const T* xd = x.data().data();
  ParallelFor(g.batch, [&](int64_t b) {
    MatMap<T> y(out.data() + b * g.cout * vol, g.cout, vol);
    if (g.k == 1) {
      y.noalias() = km * ConstMatMap<T>(xd + b * g.cin * vol, g.cin, vol);
    } else {
      T* padded = Scratch<T>(2, g.padded_size());
      PadVolume(g, xd + b * g.cin * vol, padded);
      T* col = Scratch<T>(0, rows * vol);
      Im2Col(g, padded, col);
      y.noalias() = km * ConstMatMap<T>(col, rows, vol);
    }
    y.colwise() += bm;
  });
  return Tensor<T>::MakeResult(
      Shape{g.batch, g.cout, g.depth, g.height, g.width}, std::move(out), {x, weight, bias},
      [g](TensorNode<T>& self) {
        const int64_t vol = g.volume();
        const int64_t rows = g.rows();
        const T* xd = self.parents[0]->data.data();
        ConstMatMap<T> km(self.parents[1]->data.data(), g.cout, rows);
        TensorNode<T>* px = GradParent(self, 0);
        TensorNode<T>* pk = GradParent(self, 1);
        TensorNode<T>* pb = GradParent(self, 2);
        T* dx = px ? px->grad_buffer().data() : nullptr;
        std::vector<T> dk_parts(pk ? g.batch * g.cout * rows : 0, T(0));
        ParallelFor(g.batch, [&](int64_t b) {
          ConstMatMap<T> dy(self.grad.data() + b * g.cout * vol, g.cout, vol);
          const T* colp = xd + b * g.cin * vol;
          if (g.k != 1 && pk) {
            T* padded = Scratch<T>(2, g.padded_size());
            PadVolume(g, xd + b * g.cin * vol, padded);
            T* col = Scratch<T>(0, rows * vol);
            Im2Col(g, padded, col);
            colp = col;
          }
          if (pk) {
            MatMap<T> dk(dk_parts.data() + b * g.cout * rows, g.cout, rows);
            dk.noalias() = dy * ConstMatMap<T>(colp, rows, vol).transpose();
          }
          if (dx) {
            if (g.k == 1) {
              MatMap<T> dxm(dx + b * g.cin * vol, g.cin, vol);
              dxm.noalias() += km.transpose() * dy;
            } else {
              T* dcol = Scratch<T>(1, rows * vol);
              MatMap<T> dcm(dcol, rows, vol);
              dcm.noalias() = km.transpose() * dy;
              T* padded = Scratch<T>(2, g.padded_size());
              std::fill_n(padded, g.padded_size(), T(0));
              Col2ImAdd(g, dcol, padded);
              UnpadAdd(g, padded, dx + b * g.cin * vol);
            }
          }
        });
        if (pk) {
          auto& dk = pk->grad_buffer();
          for (int64_t b = 0; b < g.batch; ++b) {
            const T* part = dk_parts.data() + b * g.cout * rows;
            for (int64_t i = 0; i < g.cout * rows; ++i) dk[i] += part[i];
          }
        }
        if (pb) {
          auto& db = pb->grad_buffer();
          for (int64_t b = 0; b < g.batch; ++b) {
            for (int64_t o = 0; o < g.cout; ++o) {
              const T* line = self.grad.data() + (b * g.cout + o) * vol;
              T acc = 0;
              for (int64_t v = 0; v < vol; ++v) acc += line[v];
              db[o] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> BatchNorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, T momentum, bool training) {
  if (x.rank() < 2) throw DimensionError("BatchNorm: expected x[B,C,...]");
  const int64_t batch = x.shape()[0];
  const int64_t channels = x.shape()[1];
  const int64_t spatial = x.numel() / (batch * channels);
  if (gamma.numel() != channels || beta.numel() != channels ||
      static_cast<int64_t>(stats.running_mean.size()) != channels) {
    throw DimensionError("BatchNorm: channel mismatch for x" + ShapeToString(x.shape()));
  }
  const int64_t count = batch * spatial;
  if (training && count < 2) {
    throw ContractError("BatchNorm: need at least two values per channel in training mode");
  }
  const T* xd = x.data().data();
  std::vector<T> mean(channels, T(0));
  std::vector<T> inv_std(channels);
  if (training) {
    // Accumulated in double so float statistics do not drift on large batches.
    // Element (b, c, s) lives at (b * channels + c) * spatial + s; for
    // spatial == 1 the channel loop is the contiguous one.
    std::vector<double> sum(channels, 0.0);
    std::vector<double> sq(channels, 0.0);
    if (spatial == 1) {
      for (int64_t b = 0; b < batch; ++b) {
        const T* row = xd + b * channels;
        for (int64_t c = 0; c < channels; ++c) sum[c] += row[c];
      }
      for (int64_t c = 0; c < channels; ++c) mean[c] = static_cast<T>(sum[c] / count);
      for (int64_t b = 0; b < batch; ++b) {
        const T* row = xd + b * channels;
        for (int64_t c = 0; c < channels; ++c) {
          const double d = row[c] - mean[c];
          sq[c] += d * d;
        }
      }
    } else {
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < channels; ++c) {
          const T* line = xd + (b * channels + c) * spatial;
          double acc = 0;
          for (int64_t s = 0; s < spatial; ++s) acc += line[s];
          sum[c] += acc;
        }
      }
      for (int64_t c = 0; c < channels; ++c) mean[c] = static_cast<T>(sum[c] / count);
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < channels; ++c) {
          const T* line = xd + (b * channels + c) * spatial;
          const T m = mean[c];
          double acc = 0;
          for (int64_t s = 0; s < spatial; ++s) {
            const double d = line[s] - m;
            acc += d * d;
          }
          sq[c] += acc;
        }
      }
    }
    for (int64_t c = 0; c < channels; ++c) {
      const double var = sq[c] / count;
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
      const T unbiased = static_cast<T>(sq[c] / (count - 1));
      stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mean[c];
      stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < channels; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + T(kBatchNormEps));
    }
  }
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  std::vector<T> normalized(x.numel());
  std::vector<T> out(x.numel());
  if (spatial == 1) {
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t base = b * channels;
      for (int64_t c = 0; c < channels; ++c) {
        const T xh = (xd[base + c] - mean[c]) * inv_std[c];
        normalized[base + c] = xh;
        out[base + c] = gm[c] * xh + bt[c];
      }
    }
  } else {
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t c = 0; c < channels; ++c) {
        const int64_t base = (b * channels + c) * spatial;
        const T m = mean[c], is = inv_std[c], gc = gm[c], bc = bt[c];
        for (int64_t s = 0; s < spatial; ++s) {
          const T xh = (xd[base + s] - m) * is;
          normalized[base + s] = xh;
          out[base + s] = gc * xh + bc;
        }
      }
    }
  }
  return Tensor<T>::MakeResult(
      x.shape(), std::move(out), {x, gamma, beta},
      [batch, channels, spatial, count, training, inv_std = std::move(inv_std),
       normalized = std::move(normalized)](TensorNode<T>& self) {
        const T* gm = self.parents[1]->data.data();
        const T* dy = self.grad.data();
        const T* xh = normalized.data();
        std::vector<T> sum_dy(channels, T(0));
        std::vector<T> sum_dy_xh(channels, T(0));
        if (spatial == 1) {
          for (int64_t b = 0; b < batch; ++b) {
            const int64_t base = b * channels;
            for (int64_t c = 0; c < channels; ++c) {
              sum_dy[c] += dy[base + c];
              sum_dy_xh[c] += dy[base + c] * xh[base + c];
            }
          }
        } else {
          for (int64_t b = 0; b < batch; ++b) {
            for (int64_t c = 0; c < channels; ++c) {
              const int64_t base = (b * channels + c) * spatial;
              T a0 = 0, a1 = 0;
              for (int64_t s = 0; s < spatial; ++s) {
                a0 += dy[base + s];
                a1 += dy[base + s] * xh[base + s];
              }
              sum_dy[c] += a0;
              sum_dy_xh[c] += a1;
            }
          }
        }
        if (TensorNode<T>* p = GradParent(self, 0)) {
          T* g = p->grad_buffer().data();
          const T inv_n = T(1) / static_cast<T>(count);
          if (spatial == 1) {
            std::vector<T> scale(channels), mean_dy(channels), mean_dy_xh(channels);
            for (int64_t c = 0; c < channels; ++c) {
              scale[c] = gm[c] * inv_std[c];
              mean_dy[c] = training ? sum_dy[c] * inv_n : T(0);
              mean_dy_xh[c] = training ? sum_dy_xh[c] * inv_n : T(0);
            }
            for (int64_t b = 0; b < batch; ++b) {
              const int64_t base = b * channels;
              for (int64_t c = 0; c < channels; ++c) {
                g[base + c] += scale[c] * (dy[base + c] - mean_dy[c] - xh[base + c] * mean_dy_xh[c]);
              }
            }
          } else {
          for (int64_t b = 0; b < batch; ++b) {
            for (int64_t c = 0; c < channels; ++c) {
              const int64_t base = (b * channels + c) * spatial;
              const T scale = gm[c] * inv_std[c];
              if (training) {
                const T mean_dy = sum_dy[c] * inv_n;
                const T mean_dy_xh = sum_dy_xh[c] * inv_n;
                for (int64_t s = 0; s < spatial; ++s) {
                  g[base + s] += scale * (dy[base + s] - mean_dy - xh[base + s] * mean_dy_xh);
                }
              } else {
                for (int64_t s = 0; s < spatial; ++s) g[base + s] += scale * dy[base + s];
              }
            }
          }
          }
        }
        if (TensorNode<T>* p = GradParent(self, 1)) {
          auto& g = p->grad_buffer();
          for (int64_t c = 0; c < channels; ++c) g[c] += sum_dy_xh[c];
        }
        if (TensorNode<T>* p = GradParent(self, 2)) {
          auto& g = p->grad_buffer();
          for (int64_t c = 0; c < channels; ++c) g[c] += sum_dy[c];
        }
      });
}

template <typename T>
Tensor<T> Dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng, bool training) {
  if (!training || rate <= T(0)) return x;
  if (rate >= T(1)) throw ContractError("Dropout: rate must be below 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T scale = T(1) / (T(1) - rate);
  std::vector<T> mask(x.numel());
  for (T& m : mask) m = keep(rng) ? scale : T(0);
  return Mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> SmoothedCrossEntropy(const Tensor<T>& logits, std::span<const int> targets,
                               T confidence) {
  if (logits.rank() != 2 || logits.shape()[0] != static_cast<int64_t>(targets.size())) {
    throw DimensionError("SmoothedCrossEntropy: logits" + ShapeToString(logits.shape()) +
                         " vs " + std::to_string(targets.size()) + " targets");
  }
  if (!(confidence > T(0) && confidence <= T(1))) {
    throw ContractError("SmoothedCrossEntropy: confidence must lie in (0,1]");
  }
  const int64_t rows = logits.shape()[0];
  const int64_t classes = logits.shape()[1];
  const T off = classes > 1 ? (T(1) - confidence) / static_cast<T>(classes - 1) : T(0);
  std::vector<T> softmax(logits.numel());
  T total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || t >= classes) {
      throw ContractError("SmoothedCrossEntropy: target " + std::to_string(t) +
                          " out of range for " + std::to_string(classes) + " classes");
    }
    const T* z = logits.data().data() + r * classes;
    const T zmax = *std::max_element(z, z + classes);
    T denom = 0;
    for (int64_t c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
    const T log_denom = std::log(denom) + zmax;
    for (int64_t c = 0; c < classes; ++c) {
      const T q = c == t ? (classes > 1 ? confidence : T(1)) : off;
      const T log_p = z[c] - log_denom;
      softmax[r * classes + c] = std::exp(log_p);
      if (q > T(0)) total -= q * log_p;
    }
  }
  total /= static_cast<T>(rows);
  std::vector<int> tcopy(targets.begin(), targets.end());
  return Tensor<T>::MakeResult(
      Shape{}, {total}, {logits},
      [rows, classes, confidence, off, softmax = std::move(softmax),
       tcopy = std::move(tcopy)](TensorNode<T>& self) {
        if (TensorNode<T>* p = GradParent(self, 0)) {
          auto& g = p->grad_buffer();
          const T scale = self.grad[0] / static_cast<T>(rows);
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < classes; ++c) {
              const T q = c == tcopy[r] ? (classes > 1 ? confidence : T(1)) : off;
              g[r * classes + c] += scale * (softmax[r * classes + c] - q);
            }
          }
        }
      });
}

#define ADVECTANT_INSTANTIATE_OPS(T)                                                         \
  template Tensor<T> Add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> Sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> Mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> Scale(const Tensor<T>&, T);                                            \
  template Tensor<T> Relu(const Tensor<T>&);                                                \
  template Tensor<T> Sum(const Tensor<T>&);                                                 \
  template Tensor<T> Mean(const Tensor<T>&);                                                \
  template Tensor<T> Reshape(const Tensor<T>&, Shape);                                      \
  template Tensor<T> Concat(const std::vector<Tensor<T>>&, int);                            \
  template Tensor<T> ReduceMax(const Tensor<T>&, int);                                      \
  template Tensor<T> ReduceMean(const Tensor<T>&, int);                                     \
  template Tensor<T> ReduceSum(const Tensor<T>&, int);                                      \
  template Tensor<T> Expand(const Tensor<T>&, int, int64_t);                                \
  template Tensor<T> GatherParticles(const Tensor<T>&, std::span<const int64_t>);           \
  template Tensor<T> Linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> Conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> BatchNorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                               BatchNormStats<T>&, T, bool);                                \
  template Tensor<T> Dropout(const Tensor<T>&, T, std::mt19937_64&, bool);                  \
  template Tensor<T> SmoothedCrossEntropy(const Tensor<T>&, std::span<const int>, T);

ADVECTANT_INSTANTIATE_OPS(float)
ADVECTANT_INSTANTIATE_OPS(double)

#undef ADVECTANT_INSTANTIATE_OPS

}  // namespace advectant
