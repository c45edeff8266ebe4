#include "advectant/data.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <vector>

#include "json.hpp"

namespace advectant {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("advectant_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

Dataset SmallSegmentationSet() {
  Dataset d;
  d.mode = LabelMode::kPerPoint;
  d.points_per_sample = 3;
  d.samples.push_back({{0.1f, -0.2f, 0.3f, 1e-30f, -0.0f, 1.0f, 0.5f, 0.25f, -1.0f}, 4, {0, 1, 2}});
  d.samples.push_back({{1, 2, 3, 4, 5, 6, 7, 8, 9}, 1, {2, 2, 0}});
  return d;
}

TEST(Normalize, CubeCornersUnchanged) {
  std::vector<float> x;
  for (int i = 0; i < 8; ++i) {
    x.push_back(i & 1 ? 1.f : -1.f);
    x.push_back(i & 2 ? 1.f : -1.f);
    x.push_back(i & 4 ? 1.f : -1.f);
  }
  const auto before = x;
  Normalize<float>(x);
  EXPECT_EQ(x, before);
}

TEST(Normalize, ScalesByLongestAxis) {
  std::vector<double> x = {0, 0, 0, 2, 1, 1, 1, 0.5, 0.25};
  Normalize<double>(x);
  EXPECT_DOUBLE_EQ(x[0], -1.0);
  EXPECT_DOUBLE_EQ(x[3], 1.0);
  EXPECT_DOUBLE_EQ(x[1], -0.5);
  EXPECT_DOUBLE_EQ(x[4], 0.5);
  EXPECT_DOUBLE_EQ(x[2], -0.5);
  EXPECT_DOUBLE_EQ(x[5], 0.5);
  EXPECT_DOUBLE_EQ(x[6], 0.0);
  EXPECT_DOUBLE_EQ(x[8], -0.25);
}

TEST(Normalize, DegeneratePointGoesToOrigin) {
  std::vector<float> x = {3, -4, 5};
  Normalize<float>(x);
  EXPECT_EQ(x, (std::vector<float>{0, 0, 0}));
  std::vector<float> same = {1, 2, 3, 1, 2, 3};
  Normalize<float>(same);
  EXPECT_EQ(same, (std::vector<float>(6, 0.f)));
}

TEST(Normalize, IsIdempotentAndBounded) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(3.0, 5.0);
  std::vector<double> x(300);
  for (double& v : x) v = n(rng);
  Normalize<double>(x);
  double lo = 1, hi = -1;
  for (double v : x) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_GE(lo, -1.0);
  EXPECT_LE(hi, 1.0);
  EXPECT_TRUE(lo == -1.0 || hi == 1.0);
  auto twice = x;
  Normalize<double>(twice);
  for (size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(twice[i], x[i], 1e-12);
}

TEST(Synth, SphereHasConstantRadius) {
  const auto s = Synth(SynthKind::kSphere, 500, 3);
  ASSERT_EQ(s.num_points(), 500);
  EXPECT_EQ(s.label, 0);
  for (int64_t p = 0; p < 500; ++p) {
    const double r = std::sqrt(s.points[3 * p] * s.points[3 * p] +
                               s.points[3 * p + 1] * s.points[3 * p + 1] +
                               s.points[3 * p + 2] * s.points[3 * p + 2]);
    EXPECT_NEAR(r, kSphereRadius, 1e-5);
  }
}

TEST(Synth, KindsCarryTheirLabels) {
  EXPECT_EQ(Synth(SynthKind::kBox, 50, 1).label, 1);
  EXPECT_EQ(Synth(SynthKind::kTwoClusters, 50, 1).label, 2);
  const auto cyl = Synth(SynthKind::kStripedCylinder, 90, 1);
  EXPECT_EQ(cyl.label, 0);
  std::set<int> parts(cyl.point_labels.begin(), cyl.point_labels.end());
  EXPECT_EQ(parts, (std::set<int>{0, 1, 2}));
  EXPECT_EQ(ParseSynthKind(SynthKindName(SynthKind::kTwoClusters)), SynthKind::kTwoClusters);
  EXPECT_THROW(ParseSynthKind("torus"), std::exception);
}

TEST(Synth, StripedCylinderAlwaysHasThreeParts) {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    for (int points : {3, 4, 64, 256}) {
      const auto s = Synth(SynthKind::kStripedCylinder, points, seed);
      std::set<int> parts(s.point_labels.begin(), s.point_labels.end());
      EXPECT_EQ(parts.size(), 3u) << "seed " << seed << " points " << points;
    }
  }
}

TEST(Synth, SameSeedSameSample) {
  for (SynthKind k : {SynthKind::kSphere, SynthKind::kBox, SynthKind::kTwoClusters,
                      SynthKind::kStripedCylinder}) {
    const auto a = Synth(k, 64, 42);
    const auto b = Synth(k, 64, 42);
    const auto c = Synth(k, 64, 43);
    EXPECT_EQ(a.points, b.points);
    EXPECT_EQ(a.point_labels, b.point_labels);
    EXPECT_NE(a.points, c.points);
  }
}

TEST(Synth, DatasetsAreNormalizedAndBalanced) {
  const Dataset cls = SynthClassification(30, 64, 5);
  EXPECT_EQ(cls.mode, LabelMode::kClass);
  EXPECT_NO_THROW(cls.Validate(3));
  int counts[3] = {0, 0, 0};
  for (const auto& s : cls.samples) {
    ++counts[s.label];
    for (float v : s.points) {
      EXPECT_GE(v, -1.f);
      EXPECT_LE(v, 1.f);
    }
  }
  EXPECT_EQ(counts[0], 10);
  EXPECT_EQ(counts[1], 10);
  EXPECT_EQ(counts[2], 10);
  const Dataset seg = SynthSegmentation(5, 256, 5);
  EXPECT_EQ(seg.mode, LabelMode::kPerPoint);
  EXPECT_NO_THROW(seg.Validate(3));
  EXPECT_EQ(seg.LabelCount(), 3);
}

TEST(Resample, ReproducibleAndWithoutReplacementWhenLarger) {
  const auto s = Synth(SynthKind::kStripedCylinder, 100, 7);
  const auto a = Resample(s, 40, 9);
  const auto b = Resample(s, 40, 9);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.point_labels, b.point_labels);
  EXPECT_NE(Resample(s, 40, 10).points, a.points);
  std::set<std::vector<float>> distinct;
  for (int i = 0; i < 40; ++i) {
    distinct.insert({a.points[3 * i], a.points[3 * i + 1], a.points[3 * i + 2]});
  }
  EXPECT_EQ(distinct.size(), 40u);
  const auto up = Resample(s, 250, 9);
  EXPECT_EQ(up.num_points(), 250);
  EXPECT_EQ(up.point_labels.size(), 250u);
  EXPECT_THROW(Resample(s, 0, 1), DataError);
}

TEST(Advp, RoundTripIsBitExact) {
  TempDir dir;
  const Dataset d = SmallSegmentationSet();
  WriteAdvp(dir.path() / "a.advp", d);
  const Dataset r = ReadAdvp(dir.path() / "a.advp");
  EXPECT_EQ(r.mode, d.mode);
  EXPECT_EQ(r.points_per_sample, 3);
  ASSERT_EQ(r.samples.size(), 2u);
  for (size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(std::memcmp(r.samples[i].points.data(), d.samples[i].points.data(), 9 * 4), 0);
    EXPECT_EQ(r.samples[i].label, d.samples[i].label);
    EXPECT_EQ(r.samples[i].point_labels, d.samples[i].point_labels);
  }
  const Dataset cls = SynthClassification(6, 16, 1);
  WriteAdvp(dir.path() / "c.advp", cls);
  const Dataset rc = ReadAdvp(dir.path() / "c.advp");
  for (size_t i = 0; i < cls.samples.size(); ++i) {
    EXPECT_EQ(rc.samples[i].points, cls.samples[i].points);
    EXPECT_EQ(rc.samples[i].label, cls.samples[i].label);
  }
}

TEST(Advp, HeaderLayout) {
  TempDir dir;
  WriteAdvp(dir.path() / "a.advp", SmallSegmentationSet());
  std::ifstream in(dir.path() / "a.advp", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  ASSERT_GE(bytes.size(), 17u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ADVP");
  EXPECT_EQ(bytes[4], kAdvpVersion);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 3);
  EXPECT_EQ(bytes[16], 2);
  // Two samples of 9 floats, a category and 3 part labels.
  EXPECT_EQ(bytes.size(), 17u + 2 * (9 * 4 + 4 + 3 * 4));
}

TEST(Advp, TruncatedFileIsRejected) {
  TempDir dir;
  const fs::path path = dir.path() / "a.advp";
  WriteAdvp(path, SmallSegmentationSet());
  const auto size = fs::file_size(path);
  for (uintmax_t cut : {uintmax_t{3}, uintmax_t{16}, size - 1}) {
    fs::resize_file(path, cut);
    EXPECT_THROW(ReadAdvp(path), FormatError) << cut;
    WriteAdvp(path, SmallSegmentationSet());
  }
  std::ofstream(path, std::ios::app | std::ios::binary) << 'x';
  EXPECT_THROW(ReadAdvp(path), FormatError);
}

TEST(Advp, BadMagicVersionAndMode) {
  TempDir dir;
  const fs::path path = dir.path() / "a.advp";
  auto corrupt = [&](size_t offset, char value) {
    WriteAdvp(path, SmallSegmentationSet());
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(offset));
    f.put(value);
  };
  corrupt(0, 'X');
  EXPECT_THROW(ReadAdvp(path), FormatError);
  corrupt(4, 9);
  EXPECT_THROW(ReadAdvp(path), FormatError);
  corrupt(16, 7);
  EXPECT_THROW(ReadAdvp(path), FormatError);
  EXPECT_THROW(ReadAdvp(dir.path() / "missing.advp"), std::exception);
}

TEST(Dataset, ValidateRejectsOutOfRangeLabels) {
  Dataset d = SmallSegmentationSet();
  EXPECT_NO_THROW(d.Validate(3));
  EXPECT_THROW(d.Validate(2), DataError);
  d.samples[0].points.pop_back();
  EXPECT_THROW(d.Validate(), DataError);
  Dataset c = SynthClassification(3, 8, 1);
  c.samples[1].label = 5;
  EXPECT_THROW(c.Validate(3), DataError);
}

TEST(Ply, LabeledVerticesParse) {
  TempDir dir;
  WriteText(dir.path() / "a.ply",
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 4\n"
            "property float x\nproperty float y\nproperty float z\nproperty int label\n"
            "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0 1\n1 0 0 2\n0 1 0 2\n0 0 1.5 0\n3 0 1 2\n");
  const PlyCloud c = ReadPly(dir.path() / "a.ply");
  EXPECT_EQ(c.num_vertices(), 4);
  EXPECT_EQ(c.points.size(), 12u);
  EXPECT_EQ(c.labels, (std::vector<int>{1, 2, 2, 0}));
  EXPECT_TRUE(c.velocities.empty());
  EXPECT_FLOAT_EQ(c.points[11], 1.5f);
}

TEST(Ply, RoundTripWithVelocities) {
  TempDir dir;
  PlyCloud c;
  c.points = {0.1f, 0.2f, 0.3f, -1e-7f, 5.f, 1.f / 3};
  c.velocities = {1.f / 7, 0, -2, 3, 4, 5};
  c.labels = {4, 0};
  WritePly(dir.path() / "b.ply", c);
  const PlyCloud r = ReadPly(dir.path() / "b.ply");
  EXPECT_EQ(r.points, c.points);
  EXPECT_EQ(r.velocities, c.velocities);
  EXPECT_EQ(r.labels, c.labels);
}

TEST(Ply, MalformedFilesAreRejected) {
  TempDir dir;
  WriteText(dir.path() / "bin.ply",
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\n"
            "end_header\n");
  EXPECT_THROW(ReadPly(dir.path() / "bin.ply"), FormatError);
  WriteText(dir.path() / "noz.ply",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
            "end_header\n0 0\n");
  EXPECT_THROW(ReadPly(dir.path() / "noz.ply"), FormatError);
  WriteText(dir.path() / "short.ply",
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
            "property float z\nend_header\n0 0 0\n1 1 1\n");
  EXPECT_THROW(ReadPly(dir.path() / "short.ply"), FormatError);
}

TEST(Manifest, AdvpSplitsLoadAndResample) {
  TempDir dir;
  Dataset d = SynthClassification(6, 20, 2);
  WriteAdvp(dir.path() / "train.advp", d);
  DatasetManifest m;
  m.points = 12;
  m.num_classes = 3;
  m.resample_seed = 4;
  m.splits.push_back({"train", {"train.advp", {}}});
  m.Save(dir.path() / "manifest.json");
  const auto loaded = DatasetManifest::Load(dir.path() / "manifest.json");
  EXPECT_TRUE(loaded.HasSplit("train"));
  EXPECT_FALSE(loaded.HasSplit("test"));
  const Dataset a = loaded.LoadSplit("train");
  const Dataset b = loaded.LoadSplit("train");
  EXPECT_EQ(a.points_per_sample, 12);
  ASSERT_EQ(a.samples.size(), 6u);
  for (size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.samples[i].num_points(), 12);
    EXPECT_EQ(a.samples[i].points, b.samples[i].points);
    EXPECT_EQ(a.samples[i].label, d.samples[i].label);
  }
  EXPECT_THROW(loaded.LoadSplit("test"), std::exception);
}

TEST(Manifest, PlySplitNormalizesAndLabels) {
  TempDir dir;
  WriteText(dir.path() / "a.ply",
            "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
            "property float z\nproperty int label\nend_header\n"
            "0 0 0 1\n4 0 0 0\n0 2 0 1\n0 0 2 0\n");
  nlohmann::json j = {{"format", "ply"},
                      {"points", 4},
                      {"label_mode", "per-point"},
                      {"num_classes", 2},
                      {"splits", {{"train", {{{"path", "a.ply"}, {"label", 0}}}}}}};
  WriteText(dir.path() / "m.json", j.dump());
  const Dataset d = DatasetManifest::Load(dir.path() / "m.json").LoadSplit("train");
  ASSERT_EQ(d.samples.size(), 1u);
  EXPECT_EQ(d.mode, LabelMode::kPerPoint);
  float lo = 1, hi = -1;
  for (float v : d.samples[0].points) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_EQ(lo, -1.f);
  EXPECT_EQ(hi, 1.f);
  std::multiset<int> labels(d.samples[0].point_labels.begin(), d.samples[0].point_labels.end());
  EXPECT_EQ(labels, (std::multiset<int>{0, 0, 1, 1}));

  j["num_classes"] = 1;
  WriteText(dir.path() / "bad.json", j.dump());
  EXPECT_THROW(DatasetManifest::Load(dir.path() / "bad.json").LoadSplit("train"), DataError);
}

TEST(Batch, PacksCloudsAndTargets) {
  const Dataset d = SmallSegmentationSet();
  const std::vector<int64_t> idx = {1, 0};
  const Batch b = MakeBatch(d, idx);
  EXPECT_EQ(b.size, 2);
  EXPECT_EQ(b.points, 3);
  ASSERT_EQ(b.clouds.size(), 18u);
  EXPECT_EQ(b.clouds[0], 1.f);
  EXPECT_EQ(b.clouds[9], 0.1f);
  EXPECT_EQ(b.targets, (std::vector<int>{2, 2, 0, 0, 1, 2}));
  const Dataset c = SynthClassification(3, 4, 1);
  const std::vector<int64_t> all = {2, 1, 0};
  EXPECT_EQ(MakeBatch(c, all).targets, (std::vector<int>{2, 1, 0}));
}

}  // namespace
}  // namespace advectant
