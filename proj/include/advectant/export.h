#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "advectant/data.h"
#include "advectant/model.h"

namespace advectant {

/// Runs one normalized cloud (xyz triples) through the model in inference
/// mode and returns one PLY table per advection step. Entry 0 is the input
/// at rest; entry s holds positions and velocities after step s. For
/// segmentation every table carries the predicted part labels.
template <typename T>
std::vector<PlyCloud> AdvectionTrajectory(AdvectiveNet<T>& model, std::span<const float> cloud);

/// Writes the trajectory as step_000.ply, step_001.ply, ... into `dir` and
/// returns the paths.
std::vector<std::filesystem::path> WriteTrajectory(const std::filesystem::path& dir,
                                                   const std::vector<PlyCloud>& trajectory);

}  // namespace advectant
