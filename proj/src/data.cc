#include "advectant/data.h"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include <Eigen/Geometry>

#include "json.hpp"

namespace advectant {
namespace {

using Json = nlohmann::json;

std::mt19937_64 SeededRng(uint64_t seed, uint64_t stream) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

Eigen::Matrix3d RandomRotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Quaterniond q(normal(rng), normal(rng), normal(rng), normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

void Rotate(std::vector<float>& points, const Eigen::Matrix3d& r) {
  for (size_t i = 0; i < points.size(); i += 3) {
    const Eigen::Vector3d p(points[i], points[i + 1], points[i + 2]);
    const Eigen::Vector3d q = r * p;
    for (int k = 0; k < 3; ++k) points[i + k] = static_cast<float>(q[k]);
  }
}

void PutU32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& what) : bytes_(bytes), what_(what) {}

  uint32_t U32() {
    Need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  uint8_t U8() {
    Need(1);
    return static_cast<uint8_t>(bytes_[pos_++]);
  }
  float F32() { return std::bit_cast<float>(U32()); }
  int32_t I32() { return std::bit_cast<int32_t>(U32()); }
  void Need(size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated file");
  }
  bool AtEnd() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string what_;
  size_t pos_ = 0;
};

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

std::string LabelModeName(LabelMode mode) {
  switch (mode) {
    case LabelMode::kNone: return "none";
    case LabelMode::kClass: return "class";
    case LabelMode::kPerPoint: return "per-point";
  }
  return "none";
}

LabelMode ParseLabelMode(const std::string& name) {
  if (name == "none") return LabelMode::kNone;
  if (name == "class") return LabelMode::kClass;
  if (name == "per-point") return LabelMode::kPerPoint;
  throw DataError("unknown label mode '" + name + "' (expected none, class or per-point)");
}

void Dataset::Validate(int num_classes) const {
  for (size_t i = 0; i < samples.size(); ++i) {
    const CloudSample& s = samples[i];
    const std::string where = "sample " + std::to_string(i);
    if (s.points.size() != static_cast<size_t>(points_per_sample) * 3) {
      throw DataError(where + " has " + std::to_string(s.points.size() / 3) + " points, expected " +
                      std::to_string(points_per_sample));
    }
    if (mode != LabelMode::kNone && s.label < 0) throw DataError(where + ": negative label");
    if (mode == LabelMode::kClass && num_classes > 0 && s.label >= num_classes) {
      throw DataError(where + ": label " + std::to_string(s.label) + " out of range");
    }
    if (mode == LabelMode::kPerPoint) {
      if (s.point_labels.size() != static_cast<size_t>(points_per_sample)) {
        throw DataError(where + ": missing per-point labels");
      }
      for (int l : s.point_labels) {
        if (l < 0 || (num_classes > 0 && l >= num_classes)) {
          throw DataError(where + ": part label " + std::to_string(l) + " out of range");
        }
      }
    }
  }
}

int Dataset::LabelCount() const {
  int top = -1;
  for (const CloudSample& s : samples) {
    if (mode == LabelMode::kPerPoint) {
      for (int l : s.point_labels) top = std::max(top, l);
    } else {
      top = std::max(top, s.label);
    }
  }
  return top + 1;
}

template <typename T>
void Normalize(std::span<T> xyz) {
  if (xyz.size() % 3 != 0) throw DataError("normalize: coordinate count is not a multiple of 3");
  if (xyz.empty()) return;
  std::array<T, 3> lo, hi;
  for (int k = 0; k < 3; ++k) lo[k] = hi[k] = xyz[k];
  for (size_t i = 0; i < xyz.size(); i += 3) {
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], xyz[i + k]);
      hi[k] = std::max(hi[k], xyz[i + k]);
    }
  }
  std::array<T, 3> center;
  T half = 0;
  for (int k = 0; k < 3; ++k) {
    center[k] = (lo[k] + hi[k]) / 2;
    half = std::max(half, (hi[k] - lo[k]) / 2);
  }
  const T scale = half > 0 ? T(1) / half : T(0);
  for (size_t i = 0; i < xyz.size(); i += 3) {
    for (int k = 0; k < 3; ++k) {
      xyz[i + k] = std::clamp((xyz[i + k] - center[k]) * scale, T(-1), T(1));
    }
  }
}

template void Normalize(std::span<float>);
template void Normalize(std::span<double>);

CloudSample Resample(const CloudSample& sample, int count, uint64_t seed) {
  const int64_t n = sample.num_points();
  if (count < 1) throw DataError("resample: point count must be positive");
  if (n == 0) throw DataError("resample: sample has no points");
  std::mt19937_64 rng = SeededRng(seed, 0);
  std::vector<int64_t> pick(count);
  if (n >= count) {
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < count; ++i) {
      std::uniform_int_distribution<int64_t> d(i, n - 1);
      std::swap(order[i], order[d(rng)]);
    }
    std::copy(order.begin(), order.begin() + count, pick.begin());
  } else {
    std::uniform_int_distribution<int64_t> d(0, n - 1);
    for (int64_t& p : pick) p = d(rng);
  }
  CloudSample out;
  out.label = sample.label;
  out.points.resize(static_cast<size_t>(count) * 3);
  for (int i = 0; i < count; ++i) {
    for (int k = 0; k < 3; ++k) out.points[3 * i + k] = sample.points[3 * pick[i] + k];
  }
  if (!sample.point_labels.empty()) {
    out.point_labels.resize(count);
    for (int i = 0; i < count; ++i) out.point_labels[i] = sample.point_labels[pick[i]];
  }
  return out;
}

std::string SynthKindName(SynthKind kind) {
  switch (kind) {
    case SynthKind::kSphere: return "sphere";
    case SynthKind::kBox: return "box";
    case SynthKind::kTwoClusters: return "two-clusters";
    case SynthKind::kStripedCylinder: return "striped-cylinder";
  }
  return "sphere";
}

SynthKind ParseSynthKind(const std::string& name) {
  if (name == "sphere" || name == "spheres") return SynthKind::kSphere;
  if (name == "box" || name == "boxes") return SynthKind::kBox;
  if (name == "two-clusters") return SynthKind::kTwoClusters;
  if (name == "striped-cylinder") return SynthKind::kStripedCylinder;
  throw DataError("unknown synthetic kind '" + name + "'");
}

CloudSample Synth(SynthKind kind, int points, uint64_t seed) {
  if (points < 1) throw DataError("synth: point count must be positive");
  std::mt19937_64 rng = SeededRng(seed, static_cast<uint64_t>(kind) + 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  CloudSample s;
  s.points.resize(static_cast<size_t>(points) * 3);
  auto put = [&](int i, double x, double y, double z) {
    s.points[3 * i] = static_cast<float>(x);
    s.points[3 * i + 1] = static_cast<float>(y);
    s.points[3 * i + 2] = static_cast<float>(z);
  };
  switch (kind) {
    case SynthKind::kSphere: {
      for (int i = 0; i < points; ++i) {
        Eigen::Vector3d d(normal(rng), normal(rng), normal(rng));
        while (d.norm() < 1e-12) d = Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
        d *= kSphereRadius / d.norm();
        put(i, d.x(), d.y(), d.z());
      }
      s.label = 0;
      break;
    }
    case SynthKind::kBox: {
      const std::array<double, 3> half = {0.4 + 0.5 * unit(rng), 0.4 + 0.5 * unit(rng),
                                          0.4 + 0.5 * unit(rng)};
      // Face pair k is perpendicular to axis k; area 4 * half[a] * half[b].
      const std::array<double, 3> area = {half[1] * half[2], half[0] * half[2], half[0] * half[1]};
      std::discrete_distribution<int> face({area[0], area[1], area[2]});
      for (int i = 0; i < points; ++i) {
        const int k = face(rng);
        std::array<double, 3> p;
        for (int a = 0; a < 3; ++a) p[a] = (2 * unit(rng) - 1) * half[a];
        p[k] = unit(rng) < 0.5 ? -half[k] : half[k];
        put(i, p[0], p[1], p[2]);
      }
      Rotate(s.points, RandomRotation(rng));
      s.label = 1;
      break;
    }
    case SynthKind::kTwoClusters: {
      Eigen::Vector3d axis(normal(rng), normal(rng), normal(rng));
      axis.normalize();
      const double offset = 0.5 + 0.3 * unit(rng);
      const double sigma = 0.12;
      for (int i = 0; i < points; ++i) {
        const double side = (i % 2 == 0) ? 1.0 : -1.0;
        const Eigen::Vector3d p = side * offset * axis +
                                  sigma * Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
        put(i, p.x(), p.y(), p.z());
      }
      s.label = 2;
      break;
    }
    case SynthKind::kStripedCylinder: {
      const double radius = 0.35;
      s.point_labels.resize(points);
      for (int i = 0; i < points; ++i) {
        // Stratified so every third holds points whenever points >= 3.
        const int part = i % 3;
        const double h = -1.0 + (2.0 / 3.0) * (part + unit(rng));
        const double theta = 2 * M_PI * unit(rng);
        put(i, radius * std::cos(theta), radius * std::sin(theta), h);
        s.point_labels[i] = std::min(2, static_cast<int>(std::floor((h + 1.0) * 1.5)));
      }
      // Tilt the axis away from +y by at most kCylinderMaxTilt so the bottom
      // third stays identifiable under rotations about the vertical.
      const double tilt = kCylinderMaxTilt * unit(rng);
      const double azimuth = 2 * M_PI * unit(rng);
      const Eigen::Vector3d axis(std::sin(tilt) * std::cos(azimuth), std::cos(tilt),
                                 std::sin(tilt) * std::sin(azimuth));
      Rotate(s.points,
             Eigen::Quaterniond::FromTwoVectors(Eigen::Vector3d::UnitZ(), axis).toRotationMatrix());
      s.label = 0;
      break;
    }
  }
  return s;
}

Dataset SynthClassification(int count, int points, uint64_t seed) {
  Dataset d;
  d.mode = LabelMode::kClass;
  d.points_per_sample = points;
  constexpr std::array<SynthKind, 3> kinds = {SynthKind::kSphere, SynthKind::kBox,
                                              SynthKind::kTwoClusters};
  for (int i = 0; i < count; ++i) {
    CloudSample s = Synth(kinds[i % 3], points, seed * 1000003ULL + static_cast<uint64_t>(i));
    Normalize(std::span<float>(s.points));
    d.samples.push_back(std::move(s));
  }
  return d;
}

Dataset SynthSegmentation(int count, int points, uint64_t seed) {
  Dataset d;
  d.mode = LabelMode::kPerPoint;
  d.points_per_sample = points;
  for (int i = 0; i < count; ++i) {
    CloudSample s =
        Synth(SynthKind::kStripedCylinder, points, seed * 1000003ULL + static_cast<uint64_t>(i));
    Normalize(std::span<float>(s.points));
    d.samples.push_back(std::move(s));
  }
  return d;
}

void WriteAdvp(const std::filesystem::path& path, const Dataset& dataset) {
  dataset.Validate();
  std::string out = "ADVP";
  PutU32(out, kAdvpVersion);
  PutU32(out, static_cast<uint32_t>(dataset.samples.size()));
  PutU32(out, static_cast<uint32_t>(dataset.points_per_sample));
  out.push_back(static_cast<char>(dataset.mode));
  for (const CloudSample& s : dataset.samples) {
    for (float v : s.points) PutU32(out, std::bit_cast<uint32_t>(v));
    if (dataset.mode != LabelMode::kNone) PutU32(out, std::bit_cast<uint32_t>(int32_t{s.label}));
    if (dataset.mode == LabelMode::kPerPoint) {
      for (int l : s.point_labels) PutU32(out, std::bit_cast<uint32_t>(int32_t{l}));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("write failed for " + path.string());
}

Dataset ReadAdvp(const std::filesystem::path& path) {
  const std::string bytes = ReadFile(path);
  const std::string what = path.string();
  if (bytes.size() < 4 || bytes.compare(0, 4, "ADVP") != 0) throw FormatError(what + ": bad magic");
  Reader r(bytes, what);
  for (int i = 0; i < 4; ++i) r.U8();
  const uint32_t version = r.U32();
  if (version != kAdvpVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  }
  const uint32_t count = r.U32();
  const uint32_t points = r.U32();
  const uint8_t mode = r.U8();
  if (mode > 2) throw FormatError(what + ": bad label mode " + std::to_string(mode));
  if (points == 0 && count > 0) throw FormatError(what + ": zero points per sample");
  Dataset d;
  d.mode = static_cast<LabelMode>(mode);
  d.points_per_sample = static_cast<int>(points);
  const uint64_t per_sample = 4ULL * (3ULL * points + (mode >= 1 ? 1 : 0) + (mode == 2 ? points : 0));
  r.Need(per_sample * count);
  d.samples.resize(count);
  for (CloudSample& s : d.samples) {
    s.points.resize(3ULL * points);
    for (float& v : s.points) v = r.F32();
    if (d.mode != LabelMode::kNone) s.label = r.I32();
    if (d.mode == LabelMode::kPerPoint) {
      s.point_labels.resize(points);
      for (int& l : s.point_labels) l = r.I32();
    }
  }
  if (!r.AtEnd()) throw FormatError(what + ": trailing bytes after last sample");
  d.Validate();
  return d;
}

PlyCloud ReadPly(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string what = path.string();
  std::string line;
  if (!std::getline(in, line) || line.substr(0, 3) != "ply") throw FormatError(what + ": not a PLY file");

  struct Element {
    std::string name;
    int64_t count = 0;
    std::vector<std::string> properties;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool ascii = false;
  bool header_done = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      Element e;
      ls >> e.name >> e.count;
      if (!ls || e.count < 0) throw FormatError(what + ": bad element line");
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) throw FormatError(what + ": property before element");
      std::string type, name;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type;
        elements.back().has_list = true;
      }
      ls >> name;
      elements.back().properties.push_back(name);
    } else if (word == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw FormatError(what + ": missing end_header");
  if (!ascii) throw FormatError(what + ": only ASCII PLY is supported");

  PlyCloud cloud;
  bool found_vertex = false;
  for (const Element& e : elements) {
    if (e.name != "vertex") {
      for (int64_t i = 0; i < e.count; ++i) {
        if (!std::getline(in, line)) throw FormatError(what + ": truncated " + e.name + " data");
      }
      continue;
    }
    if (e.has_list) throw FormatError(what + ": list properties on vertices are not supported");
    found_vertex = true;
    std::unordered_map<std::string, size_t> column;
    for (size_t i = 0; i < e.properties.size(); ++i) column[e.properties[i]] = i;
    for (const char* axis : {"x", "y", "z"}) {
      if (!column.count(axis)) throw FormatError(what + ": vertex property '" + axis + "' missing");
    }
    const bool has_velocity = column.count("vx") && column.count("vy") && column.count("vz");
    const bool has_label = column.count("label") > 0;
    std::vector<double> row(e.properties.size());
    for (int64_t v = 0; v < e.count; ++v) {
      if (!std::getline(in, line)) throw FormatError(what + ": truncated vertex data");
      std::istringstream ls(line);
      for (double& x : row) {
        if (!(ls >> x)) throw FormatError(what + ": malformed vertex line " + std::to_string(v));
      }
      for (const char* axis : {"x", "y", "z"}) {
        cloud.points.push_back(static_cast<float>(row[column[axis]]));
      }
      if (has_velocity) {
        for (const char* axis : {"vx", "vy", "vz"}) {
          cloud.velocities.push_back(static_cast<float>(row[column[axis]]));
        }
      }
      if (has_label) {
        const double l = row[column["label"]];
        if (l != std::floor(l)) throw FormatError(what + ": non-integer label");
        cloud.labels.push_back(static_cast<int>(l));
      }
    }
  }
  if (!found_vertex) throw FormatError(what + ": no vertex element");
  return cloud;
}

void WritePly(const std::filesystem::path& path, const PlyCloud& cloud) {
  const int64_t n = cloud.num_vertices();
  if (cloud.points.size() != static_cast<size_t>(n) * 3) {
    throw DataError("PLY: coordinate count is not a multiple of 3");
  }
  if (!cloud.velocities.empty() && cloud.velocities.size() != cloud.points.size()) {
    throw DataError("PLY: velocity count does not match vertex count");
  }
  if (!cloud.labels.empty() && cloud.labels.size() != static_cast<size_t>(n)) {
    throw DataError("PLY: label count does not match vertex count");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << n << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  if (!cloud.velocities.empty()) out << "property float vx\nproperty float vy\nproperty float vz\n";
  if (!cloud.labels.empty()) out << "property int label\n";
  out << "end_header\n";
  out.precision(std::numeric_limits<float>::max_digits10);
  for (int64_t i = 0; i < n; ++i) {
    out << cloud.points[3 * i] << ' ' << cloud.points[3 * i + 1] << ' ' << cloud.points[3 * i + 2];
    if (!cloud.velocities.empty()) {
      out << ' ' << cloud.velocities[3 * i] << ' ' << cloud.velocities[3 * i + 1] << ' '
          << cloud.velocities[3 * i + 2];
    }
    if (!cloud.labels.empty()) out << ' ' << cloud.labels[i];
    out << '\n';
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

DatasetManifest DatasetManifest::Load(const std::filesystem::path& path) {
  Json j;
  try {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest " + path.string());
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.format = j.value("format", std::string("advp"));
    m.points = j.at("points").get<int>();
    m.label_mode = ParseLabelMode(j.value("label_mode", std::string("class")));
    m.num_classes = j.value("num_classes", 0);
    m.resample_seed = j.value("resample_seed", uint64_t{0});
    for (const auto& [name, value] : j.at("splits").items()) {
      Split split;
      if (value.is_string()) {
        split.file = value.get<std::string>();
      } else {
        for (const Json& entry : value) {
          PlyEntry e;
          if (entry.is_string()) {
            e.path = entry.get<std::string>();
          } else {
            e.path = entry.at("path").get<std::string>();
            e.label = entry.value("label", -1);
          }
          split.ply_files.push_back(e);
        }
      }
      m.splits.emplace_back(name, std::move(split));
    }
  } catch (const Json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (m.format != "advp" && m.format != "ply") throw FormatError("manifest: unknown format " + m.format);
  if (m.points < 1) throw DataError("manifest: points must be positive");
  m.base_dir = path.parent_path();
  return m;
}

void DatasetManifest::Save(const std::filesystem::path& path) const {
  Json j;
  j["format"] = format;
  j["points"] = points;
  j["label_mode"] = LabelModeName(label_mode);
  j["num_classes"] = num_classes;
  j["resample_seed"] = resample_seed;
  Json splits = Json::object();
  for (const auto& [name, split] : this->splits) {
    if (format == "advp") {
      splits[name] = split.file.string();
    } else {
      Json list = Json::array();
      for (const PlyEntry& e : split.ply_files) list.push_back({{"path", e.path.string()}, {"label", e.label}});
      splits[name] = list;
    }
  }
  j["splits"] = splits;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

bool DatasetManifest::HasSplit(const std::string& name) const {
  return std::any_of(splits.begin(), splits.end(), [&](const auto& s) { return s.first == name; });
}

Dataset DatasetManifest::LoadSplit(const std::string& name) const {
  auto it = std::find_if(splits.begin(), splits.end(), [&](const auto& s) { return s.first == name; });
  if (it == splits.end()) throw DataError("manifest has no split '" + name + "'");
  const Split& split = it->second;
  auto resolve = [&](const std::filesystem::path& p) { return p.is_absolute() ? p : base_dir / p; };
  Dataset source;
  if (format == "advp") {
    source = ReadAdvp(resolve(split.file));
    if (source.mode != label_mode) {
      throw DataError("split '" + name + "' has label mode " + LabelModeName(source.mode) +
                      ", manifest says " + LabelModeName(label_mode));
    }
  } else {
    source.mode = label_mode;
    for (const PlyEntry& e : split.ply_files) {
      PlyCloud ply = ReadPly(resolve(e.path));
      CloudSample s;
      s.points = std::move(ply.points);
      s.label = e.label;
      if (label_mode == LabelMode::kPerPoint) {
        if (ply.labels.empty()) throw DataError(e.path.string() + ": missing per-vertex labels");
        s.point_labels = std::move(ply.labels);
        if (s.label < 0) s.label = 0;
      }
      if (label_mode == LabelMode::kClass && s.label < 0) {
        throw DataError(e.path.string() + ": missing class label in manifest");
      }
      Normalize(std::span<float>(s.points));
      source.samples.push_back(std::move(s));
    }
  }
  Dataset out;
  out.mode = label_mode;
  out.points_per_sample = points;
  out.samples.reserve(source.samples.size());
  for (size_t i = 0; i < source.samples.size(); ++i) {
    CloudSample& s = source.samples[i];
    if (s.num_points() == points) {
      out.samples.push_back(std::move(s));
    } else {
      out.samples.push_back(Resample(s, points, resample_seed * 1000003ULL + i));
    }
  }
  out.Validate(num_classes);
  return out;
}

Batch MakeBatch(const Dataset& dataset, std::span<const int64_t> indices) {
  Batch b;
  b.size = static_cast<int64_t>(indices.size());
  b.points = dataset.points_per_sample;
  b.clouds.reserve(static_cast<size_t>(b.size * b.points * 3));
  for (int64_t i : indices) {
    if (i < 0 || i >= static_cast<int64_t>(dataset.samples.size())) {
      throw DataError("batch index " + std::to_string(i) + " out of range");
    }
    const CloudSample& s = dataset.samples[i];
    b.clouds.insert(b.clouds.end(), s.points.begin(), s.points.end());
    if (dataset.mode == LabelMode::kPerPoint) {
      b.targets.insert(b.targets.end(), s.point_labels.begin(), s.point_labels.end());
    } else {
      b.targets.push_back(s.label);
    }
  }
  return b;
}

}  // namespace advectant
