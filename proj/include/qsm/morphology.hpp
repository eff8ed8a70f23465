#pragma once

#include <array>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

/// Integer voxel offsets (di, dj, dk) whose physical distance is <= radius_mm.
std::vector<std::array<int, 3>> ball_offsets(const VoxelSize& voxel_mm, double radius_mm);

/// Keeps a voxel iff every voxel of its radius_mm ball lies inside `mask`.
/// Voxels beyond the grid edge count as outside. Throws empty_mask if nothing survives.
Mask erode_mask(const Mask& mask, double radius_mm);

}  // namespace qsm
