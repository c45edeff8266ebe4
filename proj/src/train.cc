#include "advectant/train.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "advectant/ops.h"

namespace advectant {

void OptimConfig::Validate() const {
  if (!(lr > 0)) throw ContractError("lr must be positive");
  if (!(weight_decay >= 0)) throw ContractError("weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ContractError("Adam betas must lie in [0,1)");
  }
  if (!(eps > 0)) throw ContractError("eps must be positive");
  if (batch_size < 2) throw ContractError("batch_size must be at least 2");
  if (epochs < 1) throw ContractError("epochs must be positive");
  if (!(lr_decay > 0 && lr_decay < 1)) throw ContractError("lr_decay must lie in (0,1)");
  if (lr_decay_every < 1) throw ContractError("lr_decay_every must be positive");
  if (!(bn_momentum_start > 0 && bn_momentum_start <= 1) ||
      !(bn_momentum_end > 0 && bn_momentum_end <= bn_momentum_start)) {
    throw ContractError("bn momentum must satisfy 0 < end <= start <= 1");
  }
  if (!(grad_clip >= 0)) throw ContractError("grad_clip must be non-negative");
}

double LrAt(const OptimConfig& config, int epoch) {
  if (epoch < 0) throw ContractError("epoch must be non-negative");
  return config.lr * std::pow(config.lr_decay, epoch / config.lr_decay_every);
}

double BnMomentumAt(const OptimConfig& config, int epoch) {
  if (epoch < 0) throw ContractError("epoch must be non-negative");
  if (config.epochs <= 1) return config.bn_momentum_start;
  const double t = std::min(1.0, static_cast<double>(epoch) / (config.epochs - 1));
  return config.bn_momentum_start + t * (config.bn_momentum_end - config.bn_momentum_start);
}

template <typename T>
AdamW<T>::AdamW(ParameterSet<T> params, const OptimConfig& config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_.params()) {
    m_.emplace_back(p.tensor->numel(), T(0));
    v_.emplace_back(p.tensor->numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::Step(double lr) {
  const auto& refs = params_.params();
  for (const auto& p : refs) {
    if (!p.tensor->has_grad()) continue;
    for (T g : p.tensor->mutable_grad()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError("non-finite gradient in " + p.name + " at optimizer step " +
                             std::to_string(step_ + 1));
      }
    }
  }
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (size_t i = 0; i < refs.size(); ++i) {
    Tensor<T>& theta = *refs[i].tensor;
    // Parameters that took no part in the loss keep their values and moments.
    if (!theta.has_grad()) continue;
    std::span<T> w = theta.data();
    std::span<const T> g = theta.mutable_grad();
    const double shrink = refs[i].decay ? lr * config_.weight_decay : 0.0;
    std::vector<T>& m = m_[i];
    std::vector<T>& v = v_[i];
    for (size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = b1 * m[k] + (1 - b1) * gk;
      const double vk = b2 * v[k] + (1 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      double wk = static_cast<double>(w[k]);
      wk -= shrink * wk;
      wk -= lr * (mk / c1) / (std::sqrt(vk / c2) + config_.eps);
      w[k] = static_cast<T>(wk);
    }
  }
}

template <typename T>
double ClipGradNorm(const ParameterSet<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params.params()) {
    if (!p.tensor->has_grad()) continue;
    for (T g : p.tensor->mutable_grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (const auto& p : params.params()) {
      if (!p.tensor->has_grad()) continue;
      for (T& g : p.tensor->mutable_grad()) g *= scale;
    }
  }
  return norm;
}

void AugmentConfig::Validate() const {
  if (vertical_axis < 0 || vertical_axis > 2) throw ContractError("vertical_axis must be 0, 1 or 2");
  if (!(scale_min > 0 && scale_min <= scale_max)) {
    throw ContractError("augmentation scale range must satisfy 0 < min <= max");
  }
  if (!(jitter_sigma >= 0) || !(jitter_clip >= 0)) {
    throw ContractError("jitter parameters must be non-negative");
  }
}

void Augment(std::span<float> xyz, std::mt19937_64& rng, const AugmentConfig& config) {
  if (!config.enabled) return;
  std::uniform_real_distribution<double> angle_dist(0.0, 2 * std::numbers::pi);
  std::uniform_real_distribution<double> scale_dist(config.scale_min, config.scale_max);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double angle = angle_dist(rng);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  double scale[3];
  for (double& k : scale) k = scale_dist(rng);
  // The two axes spanning the horizontal plane, in right-handed order.
  const int a = (config.vertical_axis + 1) % 3;
  const int b = (config.vertical_axis + 2) % 3;
  for (size_t i = 0; i + 2 < xyz.size(); i += 3) {
    double p[3] = {xyz[i], xyz[i + 1], xyz[i + 2]};
    const double pa = c * p[a] - s * p[b];
    const double pb = s * p[a] + c * p[b];
    p[a] = pa;
    p[b] = pb;
    for (int k = 0; k < 3; ++k) {
      double noise = 0;
      if (config.jitter_sigma > 0) {
        noise = std::clamp(config.jitter_sigma * jitter(rng), -config.jitter_clip,
                           config.jitter_clip);
      }
      xyz[i + k] = static_cast<float>(p[k] * scale[k] + noise);
    }
  }
  Normalize(xyz);
}

double Accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ContractError("accuracy: size mismatch");
  if (truth.empty()) return 0.0;
  int64_t hits = 0;
  for (size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double ShapeIoU(std::span<const int> predicted, std::span<const int> truth,
                std::span<const int> parts) {
  if (predicted.size() != truth.size()) throw ContractError("IoU: size mismatch");
  if (parts.empty()) throw ContractError("IoU: empty part set");
  double total = 0;
  for (int part : parts) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
      const bool p = predicted[i] == part;
      const bool t = truth[i] == part;
      inter += p && t;
      uni += p || t;
    }
    total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return total / static_cast<double>(parts.size());
}

template <typename T>
Tensor<T> BatchTensor(const Batch& batch) {
  std::vector<T> values(batch.clouds.begin(), batch.clouds.end());
  return Tensor<T>(Shape{batch.size, batch.points, 3}, std::move(values));
}

template <typename T>
std::vector<int> ArgMaxRows(const Tensor<T>& logits) {
  const int64_t c = logits.shape().back();
  const int64_t rows = logits.numel() / c;
  std::span<const T> d = logits.data();
  std::vector<int> out(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = d.data() + r * c;
    out[r] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

template <typename T>
EvalMetrics Evaluate(AdvectiveNet<T>& model, const Dataset& dataset, int batch_size) {
  if (batch_size < 1) throw ContractError("evaluation batch size must be positive");
  NoGradGuard no_grad;
  const ModelConfig& config = model.config();
  const bool segmentation = config.task == Task::kSegmentation;
  if (segmentation != (dataset.mode == LabelMode::kPerPoint)) {
    throw DataError("dataset labels do not match the model task");
  }
  ForwardContext<T> ctx;
  ctx.training = false;
  EvalMetrics metrics;
  metrics.samples = static_cast<int64_t>(dataset.samples.size());
  const int64_t n = metrics.samples;
  double loss_sum = 0;
  std::vector<int> truth;
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min<int64_t>(n, start + batch_size); ++i) idx.push_back(i);
    const Batch batch = MakeBatch(dataset, idx);
    const ModelOutput<T> out = model.Forward(BatchTensor<T>(batch), ctx);
    const LossTerms<T> terms = ComputeLoss(out, batch.targets, config);
    loss_sum += static_cast<double>(terms.total.item()) * batch.size;
    const std::vector<int> pred = ArgMaxRows(out.logits);
    metrics.predictions.insert(metrics.predictions.end(), pred.begin(), pred.end());
    truth.insert(truth.end(), batch.targets.begin(), batch.targets.end());
  }
  metrics.loss = n > 0 ? loss_sum / static_cast<double>(n) : 0.0;
  if (!segmentation) {
    metrics.metric = Accuracy(metrics.predictions, truth);
    return metrics;
  }
  std::map<int, std::set<int>> category_parts;
  for (const CloudSample& s : dataset.samples) {
    category_parts[s.label].insert(s.point_labels.begin(), s.point_labels.end());
  }
  const int64_t p = dataset.points_per_sample;
  double iou_sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    const std::set<int>& part_set = category_parts[dataset.samples[i].label];
    const std::vector<int> parts(part_set.begin(), part_set.end());
    iou_sum += ShapeIoU(std::span<const int>(metrics.predictions).subspan(i * p, p),
                        std::span<const int>(truth).subspan(i * p, p), parts);
  }
  metrics.metric = n > 0 ? iou_sum / static_cast<double>(n) : 0.0;
  return metrics;
}

#define ADVECTANT_INSTANTIATE_TRAIN(T)                                               \
  template class AdamW<T>;                                                           \
  template double ClipGradNorm(const ParameterSet<T>&, double);                      \
  template Tensor<T> BatchTensor(const Batch&);                                      \
  template std::vector<int> ArgMaxRows(const Tensor<T>&);                            \
  template EvalMetrics Evaluate(AdvectiveNet<T>&, const Dataset&, int);

ADVECTANT_INSTANTIATE_TRAIN(float)
ADVECTANT_INSTANTIATE_TRAIN(double)

#undef ADVECTANT_INSTANTIATE_TRAIN

}  // namespace advectant
