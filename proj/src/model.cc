#include "advectant/model.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "advectant/featinit.h"
#include "advectant/ops.h"

namespace advectant {

std::string TaskName(Task task) {
  return task == Task::kClassification ? "classification" : "segmentation";
}

Task ParseTask(const std::string& name) {
  if (name == "classification") return Task::kClassification;
  if (name == "segmentation") return Task::kSegmentation;
  throw ContractError("unknown task '" + name + "'");
}

ModelConfig ModelConfig::Defaults(Task task, int num_classes) {
  ModelConfig c;
  c.task = task;
  c.num_classes = num_classes;
  c.grid = task == Task::kClassification ? 16 : 32;
  return c;
}

std::vector<int> ModelConfig::ResolvedHeadWidths() const {
  if (!head_widths.empty()) return head_widths;
  if (task == Task::kClassification) return {512, 256};
  return {256, 128};
}

void ModelConfig::Validate() const {
  if (num_classes < 1) throw ContractError("num_classes must be positive");
  grid_spec().Validate();
  advection.Validate();
  if (lambda_boundary < 0 || lambda_gather < 0 || lambda_diffusion < 0) {
    throw ContractError("penalty weights must be non-negative");
  }
  if (!(label_confidence > 0.0 && label_confidence <= 1.0)) {
    throw ContractError("label confidence must lie in (0,1]");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must lie in [0,1)");
  if (embed_widths.empty()) throw ContractError("embedding MLP needs at least one layer");
  for (int w : embed_widths) {
    if (w < 1) throw ContractError("embedding widths must be positive");
  }
  for (int w : ResolvedHeadWidths()) {
    if (w < 1) throw ContractError("head widths must be positive");
  }
  if (task == Task::kClassification && global_width < 1) {
    throw ContractError("global width must be positive");
  }
}

template <typename T>
AdvectiveNet<T>::AdvectiveNet(const ModelConfig& config, uint64_t seed) : config_(config) {
  config_.Validate();
  std::mt19937_64 rng(seed);
  int64_t width = kDescriptorWidth;
  for (int w : config_.embed_widths) {
    embed_.emplace_back(width, w, rng);
    width = w;
  }
  steps_.reserve(config_.advection.steps);
  for (int s = 0; s < config_.advection.steps; ++s) {
    steps_.emplace_back(width, config_.advection, rng);
    width = steps_.back().out_width();
  }
  if (config_.task == Task::kClassification) {
    lift_ = DenseBlock<T>(width, config_.global_width, rng);
    width = config_.global_width;
  } else {
    // Per-point features followed by the pooled cloud feature.
    width *= 2;
  }
  for (int w : config_.ResolvedHeadWidths()) {
    head_.emplace_back(width, w, rng);
    width = w;
  }
  classifier_ = LinearLayer<T>(width, config_.num_classes, rng);
}

template <typename T>
int64_t AdvectiveNet<T>::final_feature_width() const {
  if (!steps_.empty()) return steps_.back().out_width();
  return config_.embed_widths.back();
}

namespace {

// Lexicographic (x,y,z) order of each cloud; ties keep their input order.
template <typename T>
std::vector<int64_t> CanonicalOrder(std::span<const T> clouds, int64_t batch, int64_t count) {
  std::vector<int64_t> order(batch * count);
  for (int64_t b = 0; b < batch; ++b) {
    auto first = order.begin() + b * count;
    std::iota(first, first + count, int64_t{0});
    const T* pts = clouds.data() + b * count * 3;
    std::stable_sort(first, first + count, [pts](int64_t i, int64_t j) {
      return std::lexicographical_compare(pts + i * 3, pts + i * 3 + 3, pts + j * 3,
                                          pts + j * 3 + 3);
    });
  }
  return order;
}

std::vector<int64_t> InverseOrder(const std::vector<int64_t>& order, int64_t batch,
                                  int64_t count) {
  std::vector<int64_t> inverse(order.size());
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t k = 0; k < count; ++k) inverse[b * count + order[b * count + k]] = k;
  }
  return inverse;
}

}  // namespace

template <typename T>
ModelOutput<T> AdvectiveNet<T>::Forward(const Tensor<T>& clouds, const ForwardContext<T>& ctx,
                                        const TrajectorySink<T>& sink) {
  Tensor<T> input = clouds;
  if (input.rank() == 2) input = Reshape(input, {1, input.shape()[0], input.shape()[1]});
  if (input.rank() != 3 || input.shape()[2] != 3) {
    throw DimensionError("Forward expects clouds [B,P,3], got " + ShapeToString(clouds.shape()));
  }
  const int64_t batch = input.shape()[0];
  const int64_t count = input.shape()[1];
  CheckFinite<T>(input.data(), "input cloud");

  const std::vector<int64_t> order = CanonicalOrder<T>(input.data(), batch, count);
  const std::vector<int64_t> inverse = InverseOrder(order, batch, count);
  Tensor<T> sorted = GatherParticles(input.Detach(), order);

  TrajectorySink<T> unsorted_sink;
  if (sink) {
    unsorted_sink = [&sink, &inverse](const StepTrace<T>& trace) {
      NoGradGuard no_grad;
      StepTrace<T> t = trace;
      t.previous_positions = GatherParticles(trace.previous_positions, inverse);
      t.previous_velocities = GatherParticles(trace.previous_velocities, inverse);
      t.positions = GatherParticles(trace.positions, inverse);
      t.velocities = GatherParticles(trace.velocities, inverse);
      t.masses = Reshape(
          GatherParticles(Reshape(trace.masses, {trace.masses.shape()[0],
                                                 trace.masses.shape()[1], 1}),
                          inverse),
          trace.masses.shape());
      sink(t);
    };
  }

  Tensor<T> features = MultiscaleDescriptor(sorted, config_.half_extent);
  for (DenseBlock<T>& block : embed_) features = PerParticle(block, features, ctx);
  ParticleSystem<T> system = ParticleSystem<T>::AtRest(sorted, features);
  const GridSpec spec = config_.grid_spec();
  for (size_t s = 0; s < steps_.size(); ++s) {
    system = steps_[s].Forward(system, spec, config_.advection, ctx, static_cast<int>(s),
                               unsorted_sink);
  }

  const T dropout = static_cast<T>(config_.dropout);
  ModelOutput<T> out;
  out.positions = GatherParticles(system.positions, inverse);
  if (config_.task == Task::kClassification) {
    Tensor<T> x = ReduceMax(PerParticle(lift_, system.features, ctx), 1);
    for (size_t i = 0; i < head_.size(); ++i) {
      x = head_[i](x, ctx);
      if (i + 1 == head_.size() && ctx.rng) x = Dropout(x, dropout, *ctx.rng, ctx.training);
    }
    out.logits = classifier_(x);
  } else {
    const Tensor<T> pooled = Expand(ReduceMax(system.features, 1), 1, count);
    Tensor<T> x = Concat<T>({system.features, pooled}, 2);
    x = Reshape(x, {batch * count, x.shape()[2]});
    for (size_t i = 0; i < head_.size(); ++i) {
      x = head_[i](x, ctx);
      if (i + 1 == head_.size() && ctx.rng) x = Dropout(x, dropout, *ctx.rng, ctx.training);
    }
    x = classifier_(x);
    out.logits = GatherParticles(Reshape(x, {batch, count, x.shape()[1]}), inverse);
  }
  return out;
}

template <typename T>
ParameterSet<T> AdvectiveNet<T>::Parameters() {
  ParameterSet<T> set;
  for (size_t i = 0; i < embed_.size(); ++i) embed_[i].Collect("embed" + std::to_string(i), set);
  for (size_t s = 0; s < steps_.size(); ++s) steps_[s].Collect("step" + std::to_string(s), set);
  if (config_.task == Task::kClassification) lift_.Collect("lift", set);
  for (size_t i = 0; i < head_.size(); ++i) head_[i].Collect("head" + std::to_string(i), set);
  classifier_.Collect("classifier", set);
  return set;
}

template <typename T>
int64_t AdvectiveNet<T>::NumParameters() {
  return Parameters().NumParameters();
}

namespace {

struct CloudLayout {
  int64_t batch = 1;
  int64_t count = 0;
};

template <typename T>
CloudLayout PenaltyLayout(const Tensor<T>& positions, size_t labels) {
  CloudLayout l;
  if (positions.rank() == 2 && positions.shape()[1] == 3) {
    l.count = positions.shape()[0];
  } else if (positions.rank() == 3 && positions.shape()[2] == 3) {
    l.batch = positions.shape()[0];
    l.count = positions.shape()[1];
  } else {
    throw DimensionError("penalty expects positions [P,3] or [B,P,3]");
  }
  if (labels != static_cast<size_t>(l.batch * l.count)) {
    throw DimensionError("penalty expects one label per particle");
  }
  return l;
}

// Label -> (center, member count) for one cloud.
template <typename T>
std::map<int, std::pair<std::array<T, 3>, int64_t>> LabelCenters(const T* x,
                                                                 const int* labels,
                                                                 int64_t count) {
  std::map<int, std::pair<std::array<T, 3>, int64_t>> centers;
  for (int64_t p = 0; p < count; ++p) {
    auto& [c, n] = centers[labels[p]];
    if (n == 0) c = {T(0), T(0), T(0)};
    for (int a = 0; a < 3; ++a) c[a] += x[p * 3 + a];
    ++n;
  }
  for (auto& [label, entry] : centers) {
    for (int a = 0; a < 3; ++a) entry.first[a] /= static_cast<T>(entry.second);
  }
  return centers;
}

template <typename T>
T Norm3(const T* v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

}  // namespace

template <typename T>
Tensor<T> BoundaryPenalty(const Tensor<T>& positions) {
  if (positions.shape().empty() || positions.shape().back() != 3) {
    throw DimensionError("BoundaryPenalty expects positions [...,3]");
  }
  const int64_t n = positions.numel() / 3;
  T total = 0;
  for (int64_t p = 0; p < n; ++p) total += std::max(T(0), Norm3(&positions[p * 3]) - T(1));
  total /= static_cast<T>(n);
  return Tensor<T>::MakeResult(Shape{}, {total}, {positions}, [n](TensorNode<T>& self) {
    TensorNode<T>* px = self.parents[0].get();
    if (!px->requires_grad) return;
    auto& g = px->grad_buffer();
    const T scale = self.grad[0] / static_cast<T>(n);
    for (int64_t p = 0; p < n; ++p) {
      const T* x = px->data.data() + p * 3;
      const T r = Norm3(x);
      if (r > T(1)) {
        for (int a = 0; a < 3; ++a) g[p * 3 + a] += scale * x[a] / r;
      }
    }
  });
}

template <typename T>
Tensor<T> GatherPenalty(const Tensor<T>& positions, std::span<const int> labels) {
  const CloudLayout l = PenaltyLayout(positions, labels.size());
  std::vector<int> lab(labels.begin(), labels.end());
  T total = 0;
  for (int64_t b = 0; b < l.batch; ++b) {
    const auto centers =
        LabelCenters(positions.data().data() + b * l.count * 3, lab.data() + b * l.count, l.count);
    for (auto i = centers.begin(); i != centers.end(); ++i) {
      for (auto j = centers.begin(); j != centers.end(); ++j) {
        if (i == j) continue;
        T d[3];
        for (int a = 0; a < 3; ++a) d[a] = i->second.first[a] - j->second.first[a];
        total += T(0.5) * std::max(T(0), T(1) - Norm3(d));
      }
    }
  }
  total /= static_cast<T>(l.batch);
  return Tensor<T>::MakeResult(
      Shape{}, {total}, {positions}, [l, lab = std::move(lab)](TensorNode<T>& self) {
        TensorNode<T>* px = self.parents[0].get();
        if (!px->requires_grad) return;
        auto& g = px->grad_buffer();
        const T scale = self.grad[0] / static_cast<T>(l.batch);
        for (int64_t b = 0; b < l.batch; ++b) {
          const T* x = px->data.data() + b * l.count * 3;
          const int* lb = lab.data() + b * l.count;
          const auto centers = LabelCenters(x, lb, l.count);
          // d(phi)/d(c_l): both orderings of a pair contribute half each.
          std::map<int, std::array<T, 3>> dcenter;
          for (auto i = centers.begin(); i != centers.end(); ++i) {
            std::array<T, 3> acc = {T(0), T(0), T(0)};
            for (auto j = centers.begin(); j != centers.end(); ++j) {
              if (i == j) continue;
              T d[3];
              for (int a = 0; a < 3; ++a) d[a] = i->second.first[a] - j->second.first[a];
              const T r = Norm3(d);
              if (r < T(1) && r > T(0)) {
                for (int a = 0; a < 3; ++a) acc[a] -= d[a] / r;
              }
            }
            dcenter[i->first] = acc;
          }
          for (int64_t p = 0; p < l.count; ++p) {
            const auto& dc = dcenter[lb[p]];
            const T inv = T(1) / static_cast<T>(centers.at(lb[p]).second);
            for (int a = 0; a < 3; ++a) g[(b * l.count + p) * 3 + a] += scale * dc[a] * inv;
          }
        }
      });
}

template <typename T>
Tensor<T> DiffusionPenalty(const Tensor<T>& positions, std::span<const int> labels) {
  const CloudLayout l = PenaltyLayout(positions, labels.size());
  std::vector<int> lab(labels.begin(), labels.end());
  const int64_t n = l.batch * l.count;
  T total = 0;
  for (int64_t b = 0; b < l.batch; ++b) {
    const T* x = positions.data().data() + b * l.count * 3;
    const auto centers = LabelCenters(x, lab.data() + b * l.count, l.count);
    for (int64_t p = 0; p < l.count; ++p) {
      const auto& c = centers.at(lab[b * l.count + p]).first;
      T d[3];
      for (int a = 0; a < 3; ++a) d[a] = c[a] - x[p * 3 + a];
      total += Norm3(d);
    }
  }
  total /= static_cast<T>(n);
  return Tensor<T>::MakeResult(
      Shape{}, {total}, {positions}, [l, n, lab = std::move(lab)](TensorNode<T>& self) {
        TensorNode<T>* px = self.parents[0].get();
        if (!px->requires_grad) return;
        auto& g = px->grad_buffer();
        const T scale = self.grad[0] / static_cast<T>(n);
        for (int64_t b = 0; b < l.batch; ++b) {
          const T* x = px->data.data() + b * l.count * 3;
          const int* lb = lab.data() + b * l.count;
          const auto centers = LabelCenters(x, lb, l.count);
          // u_p = (x_p - c_l) / |x_p - c_l|; the center term spreads
          // -mean(u) over the label's members.
          std::vector<T> unit(l.count * 3, T(0));
          std::map<int, std::array<T, 3>> unit_sum;
          for (int64_t p = 0; p < l.count; ++p) {
            const auto& c = centers.at(lb[p]).first;
            T d[3];
            for (int a = 0; a < 3; ++a) d[a] = x[p * 3 + a] - c[a];
            const T r = Norm3(d);
            auto& s = unit_sum.try_emplace(lb[p], std::array<T, 3>{T(0), T(0), T(0)})
                          .first->second;
            if (r > T(0)) {
              for (int a = 0; a < 3; ++a) {
                unit[p * 3 + a] = d[a] / r;
                s[a] += d[a] / r;
              }
            }
          }
          for (int64_t p = 0; p < l.count; ++p) {
            const auto& s = unit_sum.at(lb[p]);
            const T inv = T(1) / static_cast<T>(centers.at(lb[p]).second);
            for (int a = 0; a < 3; ++a) {
              g[(b * l.count + p) * 3 + a] += scale * (unit[p * 3 + a] - s[a] * inv);
            }
          }
        }
      });
}

template <typename T>
LossTerms<T> ComputeLoss(const ModelOutput<T>& output, std::span<const int> targets,
                         const ModelConfig& config) {
  LossTerms<T> terms;
  const T confidence = static_cast<T>(config.label_confidence);
  Tensor<T> logits = output.logits;
  if (config.task == Task::kSegmentation) {
    if (logits.rank() == 3) logits = Reshape(logits, {logits.shape()[0] * logits.shape()[1],
                                                      logits.shape()[2]});
  }
  Tensor<T> total = SmoothedCrossEntropy(logits, targets, confidence);
  terms.cross_entropy = total.item();
  if (config.lambda_boundary > 0) {
    const Tensor<T> phi = BoundaryPenalty(output.positions);
    terms.boundary = phi.item();
    total = Add(total, Scale(phi, static_cast<T>(config.lambda_boundary)));
  }
  if (config.task == Task::kSegmentation) {
    if (config.lambda_gather > 0) {
      const Tensor<T> phi = GatherPenalty(output.positions, targets);
      terms.gather = phi.item();
      total = Add(total, Scale(phi, static_cast<T>(config.lambda_gather)));
    }
    if (config.lambda_diffusion > 0) {
      const Tensor<T> phi = DiffusionPenalty(output.positions, targets);
      terms.diffusion = phi.item();
      total = Add(total, Scale(phi, static_cast<T>(config.lambda_diffusion)));
    }
  }
  terms.total = total;
  return terms;
}

template class AdvectiveNet<float>;
template class AdvectiveNet<double>;

#define ADVECTANT_INSTANTIATE_MODEL(T)                                                 \
  template Tensor<T> BoundaryPenalty(const Tensor<T>&);                                \
  template Tensor<T> GatherPenalty(const Tensor<T>&, std::span<const int>);            \
  template Tensor<T> DiffusionPenalty(const Tensor<T>&, std::span<const int>);         \
  template LossTerms<T> ComputeLoss(const ModelOutput<T>&, std::span<const int>,       \
                                    const ModelConfig&);

ADVECTANT_INSTANTIATE_MODEL(float)
ADVECTANT_INSTANTIATE_MODEL(double)

#undef ADVECTANT_INSTANTIATE_MODEL

}  // namespace advectant
