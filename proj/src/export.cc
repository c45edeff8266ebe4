#include "advectant/export.h"

#include <cstdio>

#include "advectant/train.h"

namespace advectant {
namespace {

template <typename T>
std::vector<float> ToFloat(const Tensor<T>& t) {
  return std::vector<float>(t.data().begin(), t.data().end());
}

}  // namespace

template <typename T>
std::vector<PlyCloud> AdvectionTrajectory(AdvectiveNet<T>& model, std::span<const float> cloud) {
  if (cloud.empty() || cloud.size() % 3 != 0) throw DataError("export: bad cloud size");
  NoGradGuard no_grad;
  const int64_t p = static_cast<int64_t>(cloud.size() / 3);
  const Tensor<T> input(Shape{1, p, 3}, std::vector<T>(cloud.begin(), cloud.end()));
  std::vector<PlyCloud> frames(1);
  frames[0].points.assign(cloud.begin(), cloud.end());
  frames[0].velocities.assign(cloud.size(), 0.0f);
  ForwardContext<T> ctx;
  ctx.training = false;
  const ModelOutput<T> out = model.Forward(input, ctx, [&frames](const StepTrace<T>& trace) {
    PlyCloud frame;
    frame.points = ToFloat(trace.positions);
    frame.velocities = ToFloat(trace.velocities);
    frames.push_back(std::move(frame));
  });
  if (model.config().task == Task::kSegmentation) {
    const std::vector<int> labels = ArgMaxRows(out.logits);
    for (PlyCloud& f : frames) f.labels = labels;
  }
  return frames;
}

std::vector<std::filesystem::path> WriteTrajectory(const std::filesystem::path& dir,
                                                   const std::vector<PlyCloud>& trajectory) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (size_t s = 0; s < trajectory.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "step_%03zu.ply", s);
    paths.push_back(dir / name);
    WritePly(paths.back(), trajectory[s]);
  }
  return paths;
}

template std::vector<PlyCloud> AdvectionTrajectory(AdvectiveNet<float>&, std::span<const float>);
template std::vector<PlyCloud> AdvectionTrajectory(AdvectiveNet<double>&, std::span<const float>);

}  // namespace advectant
