#include "advectant/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace advectant {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string CsvRow(int epoch, const char* split, double loss, double metric, double lr) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%s,%.10g,%.10g,%.10g\n", epoch, split, loss, metric, lr);
  return buf;
}

// Keeps the header and rows up to and including `last_epoch`.
void TruncateMetrics(const std::filesystem::path& path, int last_epoch) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) <= last_epoch) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(RunConfig config, Dataset train, Dataset test)
    : config_(std::move(config)),
      train_(std::move(train)),
      test_(std::move(test)),
      best_metric_(-std::numeric_limits<double>::infinity()) {
  config_.Validate();
  train_.Validate(config_.model.num_classes);
  test_.Validate(config_.model.num_classes);
  if (train_.samples.size() < 2) throw DataError("training needs at least two samples");
  model_ = std::make_unique<AdvectiveNet<T>>(config_.model, config_.seed);
  optimizer_ = std::make_unique<AdamW<T>>(model_->Parameters(), config_.optim);
  std::seed_seq seq{static_cast<uint32_t>(config_.seed), static_cast<uint32_t>(config_.seed >> 32),
                    0x7261696eu};
  rng_.seed(seq);
}

template <typename T>
void Trainer<T>::Resume(const Checkpoint& checkpoint) {
  checkpoint.RestoreModel(*model_);
  checkpoint.RestoreOptimizer(*optimizer_);
  std::istringstream state(checkpoint.meta().rng_state);
  state >> rng_;
  if (!state) throw FormatError("checkpoint has no usable RNG state");
  next_epoch_ = checkpoint.meta().epoch + 1;
  best_metric_ = checkpoint.meta().best_metric;
}

template <typename T>
double Trainer<T>::TrainEpoch(int epoch) {
  const OptimConfig& o = config_.optim;
  const int64_t n = static_cast<int64_t>(train_.samples.size());
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);
  ForwardContext<T> ctx;
  ctx.training = true;
  ctx.bn_momentum = static_cast<T>(BnMomentumAt(o, epoch));
  ctx.rng = &rng_;
  const double lr = LrAt(o, epoch);
  ParameterSet<T> params = model_->Parameters();
  double loss_sum = 0;
  int64_t seen = 0;
  for (int64_t start = 0; start < n; start += o.batch_size) {
    const int64_t end = std::min<int64_t>(n, start + o.batch_size);
    // Batch statistics need at least two clouds.
    if (end - start < 2) break;
    Batch batch = MakeBatch(train_, std::span<const int64_t>(order).subspan(start, end - start));
    const int64_t stride = batch.points * 3;
    for (int64_t b = 0; b < batch.size; ++b) {
      Augment(std::span<float>(batch.clouds).subspan(b * stride, stride), rng_, config_.augment);
    }
    params.ZeroGrad();
    const ModelOutput<T> out = model_->Forward(BatchTensor<T>(batch), ctx);
    const LossTerms<T> terms = ComputeLoss(out, batch.targets, config_.model);
    const double loss = static_cast<double>(terms.total.item());
    if (!std::isfinite(loss)) {
      throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + " (cross-entropy " +
                           std::to_string(terms.cross_entropy) + ", boundary " +
                           std::to_string(terms.boundary) + ")");
    }
    terms.total.Backward();
    ClipGradNorm(params, o.grad_clip);
    optimizer_->Step(lr);
    loss_sum += loss * static_cast<double>(batch.size);
    seen += batch.size;
  }
  return seen > 0 ? loss_sum / static_cast<double>(seen) : kNaN;
}

template <typename T>
void Trainer<T>::SaveTo(const std::filesystem::path& stem, int epoch) {
  CheckpointMeta meta;
  meta.epoch = epoch;
  meta.best_metric = best_metric_;
  std::ostringstream state;
  state << rng_;
  meta.rng_state = state.str();
  meta.config = ToJson(config_);
  SaveCheckpoint(stem, *model_, optimizer_.get(), meta);
}

template <typename T>
std::vector<EpochRecord> Trainer<T>::Run(const std::filesystem::path& run_dir, const StopFn& stop) {
  const bool write = !run_dir.empty();
  const std::filesystem::path metrics_path = run_dir / "metrics.csv";
  const std::filesystem::path ckpt_dir = run_dir / "checkpoints";
  if (write) {
    std::filesystem::create_directories(ckpt_dir);
    if (next_epoch_ > 0) TruncateMetrics(metrics_path, next_epoch_ - 1);
    if (!std::filesystem::exists(metrics_path) || std::filesystem::file_size(metrics_path) == 0) {
      std::ofstream(metrics_path) << "epoch,split,loss,metric,lr\n";
    }
  }
  std::vector<EpochRecord> records;
  const int batch = config_.optim.batch_size;
  for (int epoch = next_epoch_; epoch < config_.optim.epochs; ++epoch) {
    EpochRecord r;
    r.epoch = epoch;
    r.lr = LrAt(config_.optim, epoch);
    r.train_loss = TrainEpoch(epoch);
    r.train_metric = config_.eval_train ? Evaluate(*model_, train_, batch).metric : kNaN;
    r.test_loss = kNaN;
    r.test_metric = kNaN;
    if (!test_.samples.empty()) {
      const EvalMetrics m = Evaluate(*model_, test_, batch);
      r.test_loss = m.loss;
      r.test_metric = m.metric;
    }
    next_epoch_ = epoch + 1;
    const double tracked = test_.samples.empty() ? r.train_metric : r.test_metric;
    const bool improved = std::isfinite(tracked) && tracked > best_metric_;
    if (improved) best_metric_ = tracked;
    const bool last = epoch + 1 == config_.optim.epochs;
    const bool stopping = stop && stop(r);
    if (write) {
      std::ofstream csv(metrics_path, std::ios::app);
      csv << CsvRow(epoch, "train", r.train_loss, r.train_metric, r.lr);
      if (!test_.samples.empty()) csv << CsvRow(epoch, "test", r.test_loss, r.test_metric, r.lr);
      csv.close();
      if (improved) SaveTo(ckpt_dir / "best", epoch);
      if ((epoch + 1) % config_.checkpoint_every == 0 || last || stopping) {
        SaveTo(ckpt_dir / "last", epoch);
      }
    }
    records.push_back(r);
    if (stopping) break;
  }
  return records;
}

void PrepareRunDirectory(const std::filesystem::path& dir, const RunConfig& config, bool force) {
  if (std::filesystem::exists(dir)) {
    if (!force) {
      throw ContractError("run directory " + dir.string() + " exists; pass --force to overwrite");
    }
    std::filesystem::remove_all(dir);
  }
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "config.json") << ToJson(config).dump(2) << "\n";
}

template class Trainer<float>;
template class Trainer<double>;

}  // namespace advectant
