#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

/// k-space dipole response D(k) = 1/3 - (k.h)^2/|k|^2 with D(0) = 0,
/// stored in unshifted FFT layout on the volume's grid.
struct DipoleKernel {
  Grid grid;
  B0Direction b0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t n) const { return values[n]; }
};

DipoleKernel build_dipole_kernel(const Grid& grid, const B0Direction& b0);

/// Field = real(ifft(D * fft(chi))). With `pad`, chi is zero-padded to twice
/// its size on every axis before the convolution and the result cropped back.
Volume forward_field(const Volume& chi, const DipoleKernel& kernel, bool pad = false);

/// Adds N(0, sigma^2) noise inside the mask, sigma = masked RMS(field) / snr,
/// and zeros everything outside. snr = +inf gives field * mask.
Volume simulate_measurement(const Volume& field, const Mask& mask, double snr, std::uint64_t seed);

inline constexpr double kNoiseless = std::numeric_limits<double>::infinity();

}  // namespace qsm
