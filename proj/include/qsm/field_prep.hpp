#pragma once

#include <optional>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

struct Echo {
  double te_ms = 0.0;
  Volume phase;                      // radians, temporally unwrapped
  std::optional<Volume> magnitude;   // optional fit weights (magnitude^2)
};

struct EchoSeries {
  std::vector<Echo> echoes;

  /// Paper-style acquisition grid: first TE 12.6 ms, spacing 4.1 ms.
  static std::vector<double> uniform_tes(std::size_t n, double first_ms = 12.6,
                                         double spacing_ms = 4.1);
};

struct FieldFit {
  Volume field_hz;           // weighted LS slope of phase vs TE, converted to Hz
  Mask degenerate;           // voxels inside the mask whose weights were all zero
  std::size_t n_degenerate = 0;
};

/// Per-voxel weighted least-squares phase slope inside the mask.
FieldFit fit_field(const EchoSeries& series, const Mask& mask);

inline constexpr double kGyromagneticHzPerTesla = 42.57747892e6;

/// Larmor offset in Hz to ppm of the main field.
Volume hz_to_ppm(const Volume& field_hz, double b0_tesla);

struct ResharpConfig {
  double radius_mm = 6.0;
  double tikhonov_lambda = 1e-3;
  int cg_max_iters = 200;
  double cg_tol = 1e-6;
};

struct ResharpResult {
  Volume local_field;
  Mask reliable_mask;
  int iterations = 0;
  double relative_residual = 0.0;
};

/// k-space values of the normalized spherical-mean-value kernel (unshifted layout).
std::vector<double> smv_kernel_kspace(const Grid& grid, double radius_mm);

ResharpResult resharp(const Volume& total_field, const Mask& mask, const ResharpConfig& cfg = {});

}  // namespace qsm
