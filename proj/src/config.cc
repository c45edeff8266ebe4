#include "advectant/config.h"

#include <fstream>
#include <set>

namespace advectant {
namespace {

using Json = nlohmann::json;

// Reads optional keys from one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ContractError("config: '" + name_ + "' must be an object");
  }

  template <typename V>
  void Get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const Json::exception& e) {
      throw ContractError("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  const Json* Child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void Finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ContractError("config: unknown key " + name_ + "." + key);
    }
  }

 private:
  const Json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

void RunConfig::Validate() const {
  model.Validate();
  optim.Validate();
  augment.Validate();
  if (checkpoint_every < 1) throw ContractError("checkpoint_every must be positive");
  if (data.manifest.empty()) {
    if (data.synthetic != "classification" && data.synthetic != "segmentation") {
      throw ContractError("data.synthetic must be 'classification' or 'segmentation'");
    }
    if (data.train_count < 2 || data.test_count < 1 || data.points < 1) {
      throw ContractError("synthetic data needs train_count >= 2, test_count >= 1, points >= 1");
    }
    const Task expected =
        data.synthetic == "classification" ? Task::kClassification : Task::kSegmentation;
    if (expected != model.task) {
      throw ContractError("synthetic " + data.synthetic + " data does not match task " +
                          TaskName(model.task));
    }
  }
}

Json ToJson(const ModelConfig& c) {
  const AdvectionParams& a = c.advection;
  return Json{
      {"task", TaskName(c.task)},
      {"num_classes", c.num_classes},
      {"grid", c.grid},
      {"half_extent", c.half_extent},
      {"advection",
       {{"alpha", a.alpha},
        {"total_time", a.total_time},
        {"steps", a.steps},
        {"reduce_width", a.reduce_width},
        {"conv_widths", std::vector<int>(a.conv_widths.begin(), a.conv_widths.end())},
        {"velocity_hidden", a.velocity_hidden}}},
      {"lambda_boundary", c.lambda_boundary},
      {"lambda_gather", c.lambda_gather},
      {"lambda_diffusion", c.lambda_diffusion},
      {"label_confidence", c.label_confidence},
      {"dropout", c.dropout},
      {"embed_widths", c.embed_widths},
      {"global_width", c.global_width},
      {"head_widths", c.ResolvedHeadWidths()},
  };
}

ModelConfig ModelConfigFromJson(const Json& j) {
  Section s(j, "model");
  std::string task = "classification";
  s.Get("task", task);
  int num_classes = 10;
  s.Get("num_classes", num_classes);
  ModelConfig c = ModelConfig::Defaults(ParseTask(task), num_classes);
  s.Get("grid", c.grid);
  s.Get("half_extent", c.half_extent);
  if (const Json* adv = s.Child("advection")) {
    Section a(*adv, "model.advection");
    a.Get("alpha", c.advection.alpha);
    a.Get("total_time", c.advection.total_time);
    a.Get("steps", c.advection.steps);
    a.Get("reduce_width", c.advection.reduce_width);
    std::vector<int> widths(c.advection.conv_widths.begin(), c.advection.conv_widths.end());
    a.Get("conv_widths", widths);
    if (widths.size() != c.advection.conv_widths.size()) {
      throw ContractError("config: model.advection.conv_widths needs exactly " +
                          std::to_string(c.advection.conv_widths.size()) + " entries");
    }
    std::copy(widths.begin(), widths.end(), c.advection.conv_widths.begin());
    a.Get("velocity_hidden", c.advection.velocity_hidden);
    a.Finish();
  }
  s.Get("lambda_boundary", c.lambda_boundary);
  s.Get("lambda_gather", c.lambda_gather);
  s.Get("lambda_diffusion", c.lambda_diffusion);
  s.Get("label_confidence", c.label_confidence);
  s.Get("dropout", c.dropout);
  s.Get("embed_widths", c.embed_widths);
  s.Get("global_width", c.global_width);
  s.Get("head_widths", c.head_widths);
  s.Finish();
  return c;
}

Json ToJson(const RunConfig& c) {
  const OptimConfig& o = c.optim;
  const AugmentConfig& a = c.augment;
  Json data{{"synthetic", c.data.synthetic},
            {"train_count", c.data.train_count},
            {"test_count", c.data.test_count},
            {"points", c.data.points},
            {"seed", c.data.seed}};
  if (!c.data.manifest.empty()) data = Json{{"manifest", c.data.manifest.string()}};
  if (c.data.category >= 0) data["category"] = c.data.category;
  return Json{
      {"model", ToJson(c.model)},
      {"optim",
       {{"lr", o.lr},
        {"weight_decay", o.weight_decay},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"eps", o.eps},
        {"batch_size", o.batch_size},
        {"epochs", o.epochs},
        {"lr_decay", o.lr_decay},
        {"lr_decay_every", o.lr_decay_every},
        {"bn_momentum_start", o.bn_momentum_start},
        {"bn_momentum_end", o.bn_momentum_end},
        {"grad_clip", o.grad_clip}}},
      {"augment",
       {{"enabled", a.enabled},
        {"vertical_axis", a.vertical_axis},
        {"scale_min", a.scale_min},
        {"scale_max", a.scale_max},
        {"jitter_sigma", a.jitter_sigma},
        {"jitter_clip", a.jitter_clip}}},
      {"data", data},
      {"seed", c.seed},
      {"out", c.out.string()},
      {"checkpoint_every", c.checkpoint_every},
      {"eval_train", c.eval_train},
      {"f64", c.f64},
  };
}

RunConfig RunConfigFromJson(const Json& j, const std::filesystem::path& base_dir) {
  Section s(j, "config");
  RunConfig c;
  if (const Json* m = s.Child("model")) c.model = ModelConfigFromJson(*m);
  if (const Json* o = s.Child("optim")) {
    Section r(*o, "optim");
    r.Get("lr", c.optim.lr);
    r.Get("weight_decay", c.optim.weight_decay);
    r.Get("beta1", c.optim.beta1);
    r.Get("beta2", c.optim.beta2);
    r.Get("eps", c.optim.eps);
    r.Get("batch_size", c.optim.batch_size);
    r.Get("epochs", c.optim.epochs);
    r.Get("lr_decay", c.optim.lr_decay);
    r.Get("lr_decay_every", c.optim.lr_decay_every);
    r.Get("bn_momentum_start", c.optim.bn_momentum_start);
    r.Get("bn_momentum_end", c.optim.bn_momentum_end);
    r.Get("grad_clip", c.optim.grad_clip);
    r.Finish();
  }
  if (const Json* a = s.Child("augment")) {
    Section r(*a, "augment");
    r.Get("enabled", c.augment.enabled);
    r.Get("vertical_axis", c.augment.vertical_axis);
    r.Get("scale_min", c.augment.scale_min);
    r.Get("scale_max", c.augment.scale_max);
    r.Get("jitter_sigma", c.augment.jitter_sigma);
    r.Get("jitter_clip", c.augment.jitter_clip);
    r.Finish();
  }
  if (const Json* d = s.Child("data")) {
    Section r(*d, "data");
    std::string manifest;
    r.Get("manifest", manifest);
    if (!manifest.empty()) {
      c.data.manifest = manifest;
      if (c.data.manifest.is_relative() && !base_dir.empty()) {
        c.data.manifest = base_dir / c.data.manifest;
      }
    }
    r.Get("synthetic", c.data.synthetic);
    r.Get("train_count", c.data.train_count);
    r.Get("test_count", c.data.test_count);
    r.Get("points", c.data.points);
    r.Get("seed", c.data.seed);
    r.Get("category", c.data.category);
    r.Finish();
  }
  s.Get("seed", c.seed);
  std::string out = c.out.string();
  s.Get("out", out);
  c.out = out;
  s.Get("checkpoint_every", c.checkpoint_every);
  s.Get("eval_train", c.eval_train);
  s.Get("f64", c.f64);
  s.Finish();
  return c;
}

RunConfig LoadRunConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ContractError("config " + path.string() + ": " + e.what());
  }
  return RunConfigFromJson(j, path.parent_path());
}

std::pair<Dataset, Dataset> LoadDatasets(const RunConfig& config) {
  std::pair<Dataset, Dataset> out;
  const DataConfig& d = config.data;
  if (!d.manifest.empty()) {
    const DatasetManifest m = DatasetManifest::Load(d.manifest);
    out.first = m.LoadSplit("train");
    out.second = m.HasSplit("test") ? m.LoadSplit("test") : Dataset{m.label_mode, m.points, {}};
  } else if (d.synthetic == "classification") {
    out.first = SynthClassification(d.train_count, d.points, 2 * d.seed);
    out.second = SynthClassification(d.test_count, d.points, 2 * d.seed + 1);
  } else {
    out.first = SynthSegmentation(d.train_count, d.points, 2 * d.seed);
    out.second = SynthSegmentation(d.test_count, d.points, 2 * d.seed + 1);
  }
  if (d.category >= 0) {
    for (Dataset* set : {&out.first, &out.second}) {
      std::erase_if(set->samples, [&](const CloudSample& s) { return s.label != d.category; });
    }
    if (out.first.samples.empty()) {
      throw DataError("no training samples of category " + std::to_string(d.category));
    }
  }
  const LabelMode expected =
      config.model.task == Task::kClassification ? LabelMode::kClass : LabelMode::kPerPoint;
  if (out.first.mode != expected) {
    throw DataError("dataset label mode " + LabelModeName(out.first.mode) + " does not fit task " +
                    TaskName(config.model.task));
  }
  out.first.Validate(config.model.num_classes);
  out.second.Validate(config.model.num_classes);
  return out;
}

}  // namespace advectant
