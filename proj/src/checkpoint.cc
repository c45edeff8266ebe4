#include "advectant/checkpoint.h"

#include <bit>
#include <fstream>
#include <iterator>
#include <map>

namespace advectant {
namespace {

using Json = nlohmann::json;

constexpr const char* kFormat = "advectant-checkpoint";
constexpr int kVersion = 1;

template <typename T>
constexpr const char* DtypeName() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
void AppendValues(std::string& out, std::span<const T> values) {
  using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
  for (T v : values) {
    const U bits = std::bit_cast<U>(v);
    for (size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
}

template <typename U>
U LoadLE(const char* p) {
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::filesystem::path WithSuffix(std::filesystem::path stem, const char* suffix) {
  stem += suffix;
  return stem;
}

void WriteFileAtomically(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = WithSuffix(path, ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

template <typename T>
void SaveCheckpoint(const std::filesystem::path& stem, AdvectiveNet<T>& model,
                    AdamW<T>* optimizer, const CheckpointMeta& meta) {
  if (!stem.parent_path().empty()) std::filesystem::create_directories(stem.parent_path());
  Json records = Json::array();
  std::string blob;
  int64_t offset = 0;
  auto add = [&](const std::string& name, const char* kind, const Shape& shape,
                 std::span<const T> values) {
    records.push_back({{"name", name}, {"kind", kind}, {"shape", shape}, {"offset", offset},
                       {"count", values.size()}});
    AppendValues<T>(blob, values);
    offset += static_cast<int64_t>(values.size());
  };
  ParameterSet<T> set = model.Parameters();
  for (const auto& p : set.params()) add(p.name, "param", p.tensor->shape(), p.tensor->data());
  for (const auto& b : set.buffers()) {
    add(b.name, "buffer", Shape{static_cast<int64_t>(b.values->size())}, *b.values);
  }
  if (optimizer != nullptr) {
    const auto& refs = optimizer->params().params();
    for (size_t i = 0; i < refs.size(); ++i) {
      add(refs[i].name, "adam_m", refs[i].tensor->shape(), optimizer->first_moments()[i]);
      add(refs[i].name, "adam_v", refs[i].tensor->shape(), optimizer->second_moments()[i]);
    }
  }
  Json manifest{
      {"format", kFormat},
      {"version", kVersion},
      {"dtype", DtypeName<T>()},
      {"epoch", meta.epoch},
      {"best_metric", std::isfinite(meta.best_metric) ? Json(meta.best_metric) : Json(nullptr)},
      {"optimizer_step", optimizer != nullptr ? optimizer->step_count() : meta.optimizer_step},
      {"rng_state", meta.rng_state},
      {"config", meta.config},
      {"model", ToJson(model.config())},
      {"records", records},
  };
  WriteFileAtomically(WithSuffix(stem, ".bin"), blob);
  WriteFileAtomically(WithSuffix(stem, ".json"), manifest.dump(1) + "\n");
}

Checkpoint Checkpoint::Read(const std::filesystem::path& path, const std::string& preferred) {
  std::filesystem::path stem = path;
  if (std::filesystem::is_directory(stem)) stem = stem / "checkpoints" / preferred;
  if (stem.extension() == ".json" || stem.extension() == ".bin") stem.replace_extension();
  const std::filesystem::path json_path = WithSuffix(stem, ".json");
  const std::filesystem::path bin_path = WithSuffix(stem, ".bin");
  if (!std::filesystem::exists(json_path) || !std::filesystem::exists(bin_path)) {
    throw FormatError("no checkpoint at " + stem.string());
  }
  Checkpoint c;
  c.stem_ = stem;
  Json manifest;
  try {
    std::ifstream in(json_path);
    manifest = Json::parse(in);
    if (manifest.at("format").get<std::string>() != kFormat) {
      throw FormatError(json_path.string() + ": not a checkpoint manifest");
    }
    if (manifest.at("version").get<int>() != kVersion) {
      throw FormatError(json_path.string() + ": unsupported checkpoint version");
    }
    c.dtype_ = manifest.at("dtype").get<std::string>();
    c.meta_.epoch = manifest.at("epoch").get<int>();
    if (!manifest.at("best_metric").is_null()) c.meta_.best_metric = manifest.at("best_metric").get<double>();
    c.meta_.optimizer_step = manifest.at("optimizer_step").get<int64_t>();
    c.meta_.rng_state = manifest.at("rng_state").get<std::string>();
    c.meta_.config = manifest.at("config");
    if (c.meta_.config.is_null()) c.meta_.config = Json{{"model", manifest.at("model")}};
  } catch (const Json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  if (c.dtype_ != "f32" && c.dtype_ != "f64") throw FormatError(json_path.string() + ": bad dtype");
  const size_t width = c.dtype_ == "f32" ? 4 : 8;
  std::ifstream bin(bin_path, std::ios::binary);
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  try {
    for (const Json& r : manifest.at("records")) {
      CheckpointRecord rec;
      rec.name = r.at("name").get<std::string>();
      rec.kind = r.at("kind").get<std::string>();
      rec.shape = r.at("shape").get<Shape>();
      const int64_t offset = r.at("offset").get<int64_t>();
      const int64_t count = r.at("count").get<int64_t>();
      if (offset < 0 || count < 0 || static_cast<size_t>(offset + count) * width > blob.size()) {
        throw FormatError(bin_path.string() + ": truncated checkpoint data");
      }
      rec.values.resize(count);
      const char* p = blob.data() + offset * width;
      for (int64_t i = 0; i < count; ++i) {
        rec.values[i] = width == 4 ? std::bit_cast<float>(LoadLE<uint32_t>(p + 4 * i))
                                   : std::bit_cast<double>(LoadLE<uint64_t>(p + 8 * i));
      }
      c.records_.push_back(std::move(rec));
    }
  } catch (const Json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  return c;
}

RunConfig Checkpoint::run_config() const {
  return RunConfigFromJson(meta_.config);
}

template <typename T>
void Checkpoint::RestoreModel(AdvectiveNet<T>& model) const {
  std::map<std::string, const CheckpointRecord*> params, buffers;
  for (const CheckpointRecord& r : records_) {
    if (r.kind == "param") params[r.name] = &r;
    if (r.kind == "buffer") buffers[r.name] = &r;
  }
  ParameterSet<T> set = model.Parameters();
  for (const auto& p : set.params()) {
    auto it = params.find(p.name);
    if (it == params.end()) throw FormatError("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor->shape()) {
      throw FormatError("checkpoint parameter " + p.name + " has shape " +
                        ShapeToString(it->second->shape) + ", model expects " +
                        ShapeToString(p.tensor->shape()));
    }
    std::span<T> dst = p.tensor->data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
  }
  for (const auto& b : set.buffers()) {
    auto it = buffers.find(b.name);
    if (it == buffers.end()) throw FormatError("checkpoint lacks buffer " + b.name);
    if (it->second->values.size() != b.values->size()) {
      throw FormatError("checkpoint buffer " + b.name + " has the wrong size");
    }
    for (size_t i = 0; i < b.values->size(); ++i) (*b.values)[i] = static_cast<T>(it->second->values[i]);
  }
  if (params.size() != set.params().size() || buffers.size() != set.buffers().size()) {
    throw FormatError("checkpoint holds records the model does not have");
  }
}

template <typename T>
void Checkpoint::RestoreOptimizer(AdamW<T>& optimizer) const {
  std::map<std::string, const CheckpointRecord*> m, v;
  for (const CheckpointRecord& r : records_) {
    if (r.kind == "adam_m") m[r.name] = &r;
    if (r.kind == "adam_v") v[r.name] = &r;
  }
  const auto& refs = optimizer.params().params();
  for (size_t i = 0; i < refs.size(); ++i) {
    auto mi = m.find(refs[i].name);
    auto vi = v.find(refs[i].name);
    if (mi == m.end() || vi == v.end()) {
      throw FormatError("checkpoint lacks optimizer state for " + refs[i].name);
    }
    auto& dm = optimizer.first_moments()[i];
    auto& dv = optimizer.second_moments()[i];
    if (mi->second->values.size() != dm.size() || vi->second->values.size() != dv.size()) {
      throw FormatError("optimizer state for " + refs[i].name + " has the wrong size");
    }
    for (size_t k = 0; k < dm.size(); ++k) {
      dm[k] = static_cast<T>(mi->second->values[k]);
      dv[k] = static_cast<T>(vi->second->values[k]);
    }
  }
  optimizer.set_step_count(meta_.optimizer_step);
}

template void SaveCheckpoint(const std::filesystem::path&, AdvectiveNet<float>&, AdamW<float>*,
                             const CheckpointMeta&);
template void SaveCheckpoint(const std::filesystem::path&, AdvectiveNet<double>&, AdamW<double>*,
                             const CheckpointMeta&);
template void Checkpoint::RestoreModel(AdvectiveNet<float>&) const;
template void Checkpoint::RestoreModel(AdvectiveNet<double>&) const;
template void Checkpoint::RestoreOptimizer(AdamW<float>&) const;
template void Checkpoint::RestoreOptimizer(AdamW<double>&) const;

}  // namespace advectant
