#include "qsm/morphology.hpp"

#include <algorithm>
#include <cmath>

namespace qsm {

std::vector<std::array<int, 3>> ball_offsets(const VoxelSize& voxel_mm, double radius_mm) {
  if (!(radius_mm >= 0.0) || !std::isfinite(radius_mm)) {
    fail(ErrorCode::invalid_argument, "radius must be finite and >= 0");
  }
  const int rx = static_cast<int>(std::floor(radius_mm / voxel_mm.dx));
  const int ry = static_cast<int>(std::floor(radius_mm / voxel_mm.dy));
  const int rz = static_cast<int>(std::floor(radius_mm / voxel_mm.dz));
  const double r2 = radius_mm * radius_mm * (1.0 + 1e-12);
  std::vector<std::array<int, 3>> out;
  for (int k = -rz; k <= rz; ++k) {
    for (int j = -ry; j <= ry; ++j) {
      for (int i = -rx; i <= rx; ++i) {
        const double x = i * voxel_mm.dx, y = j * voxel_mm.dy, z = k * voxel_mm.dz;
        if (x * x + y * y + z * z <= r2) out.push_back({i, j, k});
      }
    }
  }
  return out;
}

Mask erode_mask(const Mask& mask, double radius_mm) {
  auto offsets = ball_offsets(mask.grid().voxel_mm, radius_mm);
  // Far offsets first: they are the ones most likely to hit background.
  std::stable_sort(offsets.begin(), offsets.end(), [](const auto& a, const auto& b) {
    return a[0] * a[0] + a[1] * a[1] + a[2] * a[2] > b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
  });

  const Dims d = mask.dims();
  const auto nx = static_cast<long>(d.nx), ny = static_cast<long>(d.ny),
             nz = static_cast<long>(d.nz);
  Mask out = Mask::empty(mask.grid());
  for (long k = 0; k < nz; ++k) {
    for (long j = 0; j < ny; ++j) {
      for (long i = 0; i < nx; ++i) {
        if (!mask.at(i, j, k)) continue;
        bool keep = true;
        for (const auto& o : offsets) {
          const long x = i + o[0], y = j + o[1], z = k + o[2];
          if (x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz || !mask.at(x, y, z)) {
            keep = false;
            break;
          }
        }
        if (keep) out.set(mask.grid().index(i, j, k), true);
      }
    }
  }
  if (out.count() == 0) {
    fail(ErrorCode::empty_mask, "erode_mask: radius " + std::to_string(radius_mm) +
                                    " mm leaves an empty mask");
  }
  return out;
}

}  // namespace qsm
