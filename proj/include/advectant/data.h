#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advectant {

/// Malformed or truncated file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Well-formed file whose contents violate the dataset contract.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LabelMode : uint8_t {
  kNone = 0,
  // One class label per sample.
  kClass = 1,
  // A category id per sample plus one part label per point.
  kPerPoint = 2,
};

std::string LabelModeName(LabelMode mode);
LabelMode ParseLabelMode(const std::string& name);

struct CloudSample {
  // xyz triples.
  std::vector<float> points;
  // Class label (kClass) or category id (kPerPoint); -1 when unlabeled.
  int label = -1;
  // Part label per point (kPerPoint only).
  std::vector<int> point_labels;

  int64_t num_points() const { return static_cast<int64_t>(points.size() / 3); }
};

struct Dataset {
  LabelMode mode = LabelMode::kNone;
  int points_per_sample = 0;
  std::vector<CloudSample> samples;

  /// Throws DataError unless every sample has points_per_sample points, the
  /// labels the mode requires, and labels in [0, num_classes) when
  /// num_classes > 0 (part labels for kPerPoint, sample labels otherwise).
  void Validate(int num_classes = 0) const;
  /// One past the largest class or part label.
  int LabelCount() const;
};

/// Centers the axis-aligned bounding box at the origin and scales uniformly
/// so the longest axis spans [-1,1]. A cloud without extent collapses to the
/// origin.
template <typename T>
void Normalize(std::span<T> xyz);

/// Draws `count` points uniformly: without replacement when the sample has at
/// least that many points, with replacement otherwise.
CloudSample Resample(const CloudSample& sample, int count, uint64_t seed);

enum class SynthKind { kSphere, kBox, kTwoClusters, kStripedCylinder };

std::string SynthKindName(SynthKind kind);
SynthKind ParseSynthKind(const std::string& name);

inline constexpr float kSphereRadius = 0.8f;

inline constexpr double kCylinderMaxTilt = M_PI / 3;

/// One raw (unnormalized) synthetic cloud. Sphere, box and two-clusters
/// carry class labels 0, 1, 2, with box and clusters randomly oriented. The
/// striped cylinder carries category 0 and part labels 0, 1, 2 by axial
/// third from the bottom; its axis leans away from +y by up to
/// kCylinderMaxTilt.
CloudSample Synth(SynthKind kind, int points, uint64_t seed);

/// `count` normalized samples cycling through sphere, box and two-clusters.
Dataset SynthClassification(int count, int points, uint64_t seed);
/// `count` normalized striped cylinders.
Dataset SynthSegmentation(int count, int points, uint64_t seed);

// Flat binary format: "ADVP", u32 version, u32 count, u32 points, u8 label
// mode, then per sample the xyz float32 triples followed by its labels as
// int32 (mode 1: label; mode 2: category then one label per point). All
// values little-endian.
inline constexpr uint32_t kAdvpVersion = 1;

void WriteAdvp(const std::filesystem::path& path, const Dataset& dataset);
/// Reads the whole file or throws; no partial dataset is returned.
Dataset ReadAdvp(const std::filesystem::path& path);

/// Per-vertex table for ASCII PLY files.
struct PlyCloud {
  std::vector<float> points;
  // Empty, or vx vy vz per vertex.
  std::vector<float> velocities;
  // Empty, or one integer label per vertex.
  std::vector<int> labels;

  int64_t num_vertices() const { return static_cast<int64_t>(points.size() / 3); }
};

/// Reads an ASCII PLY. x, y, z are required; vx, vy, vz and an integer
/// `label` property are picked up when present. Other properties and
/// elements are ignored.
PlyCloud ReadPly(const std::filesystem::path& path);
void WritePly(const std::filesystem::path& path, const PlyCloud& cloud);

/// Describes where a dataset lives and how to bring it to a fixed size.
///
/// {"format": "advp" | "ply", "points": P, "label_mode": "class",
///  "num_classes": C, "resample_seed": s,
///  "splits": {"train": "train.advp", "test": [{"path": "a.ply", "label": 2}]}}
///
/// An advp split is a single file path; a ply split lists files, each with
/// an optional sample label (class or category). Relative paths resolve
/// against the manifest's directory.
struct DatasetManifest {
  std::string format = "advp";
  int points = 0;
  LabelMode label_mode = LabelMode::kClass;
  int num_classes = 0;
  uint64_t resample_seed = 0;
  std::filesystem::path base_dir;
  struct PlyEntry {
    std::filesystem::path path;
    int label = -1;
  };
  struct Split {
    std::filesystem::path file;
    std::vector<PlyEntry> ply_files;
  };
  std::vector<std::pair<std::string, Split>> splits;

  static DatasetManifest Load(const std::filesystem::path& path);
  void Save(const std::filesystem::path& path) const;
  bool HasSplit(const std::string& name) const;

  /// Loads the split, resamples every sample to `points` points (seeded by
  /// resample_seed and the sample index) and validates labels.
  Dataset LoadSplit(const std::string& name) const;
};

struct Batch {
  int64_t size = 0;
  int64_t points = 0;
  // [size, points, 3] row-major.
  std::vector<float> clouds;
  // One label per sample (kClass) or per point (kPerPoint).
  std::vector<int> targets;
};

Batch MakeBatch(const Dataset& dataset, std::span<const int64_t> indices);

}  // namespace advectant
