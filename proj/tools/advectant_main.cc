#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "advectant/checkpoint.h"
#include "advectant/config.h"
#include "advectant/data.h"
#include "advectant/export.h"
#include "advectant/parallel.h"
#include "advectant/trainer.h"

namespace fs = std::filesystem;
using namespace advectant;

namespace {

struct Overrides {
  std::optional<uint64_t> seed;
  std::optional<int> steps;
  std::optional<int> grid;
  std::optional<double> alpha;
  std::optional<int> epochs;
  std::optional<std::string> out;
  bool f64 = false;

  void Apply(RunConfig& c) const {
    if (seed) c.seed = *seed;
    if (steps) c.model.advection.steps = *steps;
    if (grid) c.model.grid = *grid;
    if (alpha) c.model.advection.alpha = *alpha;
    if (epochs) c.optim.epochs = *epochs;
    if (out) c.out = *out;
    if (f64) c.f64 = true;
  }
};

void AddOverrideFlags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Model and training RNG seed");
  cmd->add_option("--steps", o.steps, "Advection steps (0 disables advection)");
  cmd->add_option("--grid", o.grid, "Grid resolution N (N^3 nodes)");
  cmd->add_option("--alpha", o.alpha, "PIC weight of the PIC/FLIP blend");
  cmd->add_option("--epochs", o.epochs, "Number of training epochs");
  cmd->add_option("--out", o.out, "Run directory");
  cmd->add_flag("--f64", o.f64, "Use 64-bit floats throughout");
}

template <typename T>
int TrainWith(const RunConfig& config, const std::optional<Checkpoint>& resume) {
  auto [train, test] = LoadDatasets(config);
  Trainer<T> trainer(config, std::move(train), std::move(test));
  if (resume) trainer.Resume(*resume);
  std::printf("training %s, %lld parameters, epochs %d..%d -> %s\n",
              TaskName(config.model.task).c_str(),
              static_cast<long long>(trainer.model().NumParameters()), trainer.next_epoch(),
              config.optim.epochs - 1, config.out.string().c_str());
  try {
    trainer.Run(config.out, [](const EpochRecord& r) {
      std::printf("epoch %3d  lr %.6f  train loss %.4f metric %.4f  test loss %.4f metric %.4f\n",
                  r.epoch, r.lr, r.train_loss, r.train_metric, r.test_loss, r.test_metric);
      std::fflush(stdout);
      return false;
    });
  } catch (const NonFiniteError& e) {
    std::fprintf(stderr, "aborted: %s; last good checkpoint kept in %s\n", e.what(),
                 (config.out / "checkpoints").string().c_str());
    return 3;
  }
  return 0;
}

int CmdTrain(const std::string& config_path, const Overrides& o, const std::string& resume,
             bool force) {
  if (!resume.empty()) {
    const Checkpoint ckpt = Checkpoint::Read(resume);
    RunConfig config = ckpt.run_config();
    o.Apply(config);
    config.Validate();
    if (!fs::exists(config.out)) {
      throw ContractError("resume target run directory " + config.out.string() + " is missing");
    }
    return config.f64 ? TrainWith<double>(config, ckpt) : TrainWith<float>(config, ckpt);
  }
  if (config_path.empty()) throw ContractError("train needs --config (or --resume)");
  RunConfig config = LoadRunConfig(config_path);
  o.Apply(config);
  config.Validate();
  PrepareRunDirectory(config.out, config, force);
  return config.f64 ? TrainWith<double>(config, std::nullopt)
                    : TrainWith<float>(config, std::nullopt);
}

template <typename T>
int EvalWith(const Checkpoint& ckpt, const RunConfig& config, const std::string& split,
             const std::string& format) {
  AdvectiveNet<T> model(config.model, config.seed);
  ckpt.RestoreModel(model);
  auto [train, test] = LoadDatasets(config);
  const Dataset& data = split == "train" ? train : test;
  if (data.samples.empty()) throw DataError("split '" + split + "' is empty");
  const EvalMetrics m = Evaluate(model, data, config.optim.batch_size);
  const char* metric = config.model.task == Task::kClassification ? "accuracy" : "miou";
  if (format == "csv") {
    std::printf("epoch,split,loss,metric,name\n%d,%s,%.10g,%.10g,%s\n", ckpt.meta().epoch,
                split.c_str(), m.loss, m.metric, metric);
  } else {
    std::printf("checkpoint %s (epoch %d)\n%s split: %lld samples, loss %.6f, %s %.6f\n",
                ckpt.stem().string().c_str(), ckpt.meta().epoch, split.c_str(),
                static_cast<long long>(m.samples), m.loss, metric, m.metric);
  }
  return 0;
}

int CmdEval(const std::string& checkpoint, const std::string& data, const std::string& split,
            const std::string& format, bool f64) {
  const Checkpoint ckpt = Checkpoint::Read(checkpoint);
  RunConfig config = ckpt.run_config();
  if (!data.empty()) config.data = DataConfig{data};
  const bool wide = f64 || ckpt.dtype() == "f64";
  return wide ? EvalWith<double>(ckpt, config, split, format)
              : EvalWith<float>(ckpt, config, split, format);
}

template <typename T>
int ExportWith(const Checkpoint& ckpt, const RunConfig& config, const std::vector<float>& cloud,
               const fs::path& out) {
  AdvectiveNet<T> model(config.model, config.seed);
  ckpt.RestoreModel(model);
  const auto paths = WriteTrajectory(out, AdvectionTrajectory(model, cloud));
  for (const fs::path& p : paths) std::printf("%s\n", p.string().c_str());
  return 0;
}

int CmdExport(const std::string& checkpoint, const std::string& ply, const std::string& split,
              int sample, const std::string& out, bool force, bool f64) {
  if (out.empty()) throw ContractError("export needs --out");
  const Checkpoint ckpt = Checkpoint::Read(checkpoint);
  const RunConfig config = ckpt.run_config();
  std::vector<float> cloud;
  if (!ply.empty()) {
    cloud = ReadPly(ply).points;
    Normalize(std::span<float>(cloud));
  } else {
    auto [train, test] = LoadDatasets(config);
    const Dataset& data = split == "train" ? train : test;
    if (sample < 0 || sample >= static_cast<int>(data.samples.size())) {
      throw DataError("sample index " + std::to_string(sample) + " out of range");
    }
    cloud = data.samples[sample].points;
  }
  if (fs::exists(out)) {
    if (!force) throw ContractError("output directory " + out + " exists; pass --force to overwrite");
    fs::remove_all(out);
  }
  const bool wide = f64 || ckpt.dtype() == "f64";
  return wide ? ExportWith<double>(ckpt, config, cloud, out)
              : ExportWith<float>(ckpt, config, cloud, out);
}

int CmdSynth(const std::string& kind, const std::string& task, int train_count, int test_count,
             int points, uint64_t seed, const std::string& out, bool force) {
  if (out.empty()) throw ContractError("synth needs --out");
  if (!kind.empty()) {
    const CloudSample s = Synth(ParseSynthKind(kind), points, seed);
    PlyCloud ply;
    ply.points = s.points;
    Normalize(std::span<float>(ply.points));
    ply.labels = s.point_labels;
    if (fs::exists(out) && !force) throw ContractError(out + " exists; pass --force to overwrite");
    WritePly(out, ply);
    std::printf("%s\n", out.c_str());
    return 0;
  }
  if (fs::exists(out)) {
    if (!force) throw ContractError("output directory " + out + " exists; pass --force to overwrite");
    fs::remove_all(out);
  }
  fs::create_directories(out);
  const bool classification = task == "classification";
  if (!classification && task != "segmentation") throw ContractError("unknown task " + task);
  const Dataset train = classification ? SynthClassification(train_count, points, 2 * seed)
                                       : SynthSegmentation(train_count, points, 2 * seed);
  const Dataset test = classification ? SynthClassification(test_count, points, 2 * seed + 1)
                                      : SynthSegmentation(test_count, points, 2 * seed + 1);
  WriteAdvp(fs::path(out) / "train.advp", train);
  WriteAdvp(fs::path(out) / "test.advp", test);
  DatasetManifest m;
  m.format = "advp";
  m.points = points;
  m.label_mode = train.mode;
  m.num_classes = 3;
  m.resample_seed = seed;
  m.splits.push_back({"train", {"train.advp", {}}});
  m.splits.push_back({"test", {"test.advp", {}}});
  m.Save(fs::path(out) / "manifest.json");
  std::printf("%s\n", (fs::path(out) / "manifest.json").string().c_str());
  return 0;
}

int CmdInspect(const std::string& checkpoint, bool records) {
  const Checkpoint ckpt = Checkpoint::Read(checkpoint);
  const RunConfig config = ckpt.run_config();
  int64_t params = 0;
  for (const CheckpointRecord& r : ckpt.records()) {
    if (r.kind == "param") params += static_cast<int64_t>(r.values.size());
  }
  std::printf("checkpoint     %s\n", ckpt.stem().string().c_str());
  std::printf("dtype          %s\n", ckpt.dtype().c_str());
  std::printf("epoch          %d\n", ckpt.meta().epoch);
  std::printf("optimizer step %lld\n", static_cast<long long>(ckpt.meta().optimizer_step));
  std::printf("best metric    %.6f\n", ckpt.meta().best_metric);
  std::printf("task           %s (%d classes)\n", TaskName(config.model.task).c_str(),
              config.model.num_classes);
  std::printf("grid %d, steps %d, alpha %.3f\n", config.model.grid, config.model.advection.steps,
              config.model.advection.alpha);
  std::printf("parameters     %lld\n", static_cast<long long>(params));
  if (records) {
    for (const CheckpointRecord& r : ckpt.records()) {
      double sq = 0;
      for (double v : r.values) sq += v * v;
      std::printf("  %-8s %-40s %-18s |x|=%.6g\n", r.kind.c_str(), r.name.c_str(),
                  ShapeToString(r.shape).c_str(), std::sqrt(sq));
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  RetainHeapPages();
  CLI::App app{"advectant: point cloud learning with particle advection"};
  app.require_subcommand(1);

  Overrides overrides;
  std::string config_path, resume;
  bool force = false;
  CLI::App* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config_path, "Run config (JSON)");
  train->add_option("--resume", resume, "Checkpoint or run directory to continue from");
  train->add_flag("--force", force, "Replace an existing run directory");
  AddOverrideFlags(train, overrides);

  std::string checkpoint, data, split = "test", format = "text";
  bool f64 = false;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint or run directory")->required();
  eval->add_option("--data", data, "Dataset manifest (defaults to the run's data)");
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--format", format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
  eval->add_flag("--f64", f64, "Evaluate in 64-bit precision");

  std::string ply, out;
  int sample = 0;
  CLI::App* exp = app.add_subcommand("export", "Write the advection trajectory of one cloud");
  exp->add_option("--checkpoint", checkpoint, "Checkpoint or run directory")->required();
  exp->add_option("--ply", ply, "Input cloud (defaults to a sample of the run's data)");
  exp->add_option("--split", split, "Split to take --sample from")
      ->check(CLI::IsMember({"train", "test"}));
  exp->add_option("--sample", sample, "Sample index within the split");
  exp->add_option("--out", out, "Output directory for step_XXX.ply")->required();
  exp->add_flag("--force", force, "Replace an existing output directory");
  exp->add_flag("--f64", f64, "Run in 64-bit precision");

  std::string kind, task = "classification";
  int train_count = 200, test_count = 60, points = 64;
  uint64_t seed = 1;
  CLI::App* synth = app.add_subcommand("synth", "Generate synthetic data");
  synth->add_option("--kind", kind,
                    "Single cloud of this kind as PLY: sphere, box, two-clusters, striped-cylinder");
  synth->add_option("--task", task, "Dataset kind: classification or segmentation");
  synth->add_option("--train", train_count, "Training samples");
  synth->add_option("--test", test_count, "Test samples");
  synth->add_option("--points", points, "Points per cloud");
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", out, "PLY file (--kind) or dataset directory")->required();
  synth->add_flag("--force", force, "Replace existing output");

  bool records = false;
  CLI::App* inspect = app.add_subcommand("inspect", "Summarize a checkpoint");
  inspect->add_option("--checkpoint", checkpoint, "Checkpoint or run directory")->required();
  inspect->add_flag("--records", records, "List every stored tensor");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return CmdTrain(config_path, overrides, resume, force);
    if (*eval) return CmdEval(checkpoint, data, split, format, f64);
    if (*exp) return CmdExport(checkpoint, ply, split, sample, out, force, f64);
    if (*synth) return CmdSynth(kind, task, train_count, test_count, points, seed, out, force);
    if (*inspect) return CmdInspect(checkpoint, records);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
