#include "qsm/dipole.hpp"

#include <cmath>
#include <random>

#include "qsm/fft.hpp"

namespace qsm {

DipoleKernel build_dipole_kernel(const Grid& grid, const B0Direction& b0) {
  const KGrid k = KGrid::build(grid);
  const Dims d = grid.dims;
  DipoleKernel kernel{grid, b0, std::vector<double>(grid.count())};
  const double hx = b0.x(), hy = b0.y(), hz = b0.z();
  auto dipole = [&](double kx, double ky, double kz) {
    const double k2 = kx * kx + ky * ky + kz * kz;
    const double kh = kx * hx + ky * hy + kz * hz;
    return 1.0 / 3.0 - kh * kh / k2;
  };
  // On an even axis the Nyquist bin stands for both +k and -k. For an
  // oblique B0 the two signs give different values, which would break the
  // Hermitian symmetry a real-to-real filter needs, so they are averaged.
  auto nyquist = [](std::size_t i, std::size_t n) { return n % 2 == 0 && i == n / 2; };
  std::size_t n = 0;
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x, ++n) {
        const double kx = k.kx[x], ky = k.ky[y], kz = k.kz[z];
        if (kx == 0.0 && ky == 0.0 && kz == 0.0) {
          kernel.values[n] = 0.0;
          continue;
        }
        const int sx = nyquist(x, d.nx) ? 2 : 1, sy = nyquist(y, d.ny) ? 2 : 1,
                  sz = nyquist(z, d.nz) ? 2 : 1;
        double sum = 0.0;
        for (int a = 0; a < sx; ++a) {
          for (int b = 0; b < sy; ++b) {
            for (int c = 0; c < sz; ++c) {
              sum += dipole(a ? -kx : kx, b ? -ky : ky, c ? -kz : kz);
            }
          }
        }
        kernel.values[n] = sum / (sx * sy * sz);
      }
    }
  }
  return kernel;
}

namespace {

Volume pad_double(const Volume& v) {
  const Dims d = v.dims();
  const Grid padded({2 * d.nx, 2 * d.ny, 2 * d.nz}, v.voxel_mm());
  Volume out = Volume::zeros(padded, v.unit());
  for (std::size_t k = 0; k < d.nz; ++k)
    for (std::size_t j = 0; j < d.ny; ++j)
      for (std::size_t i = 0; i < d.nx; ++i) out.at(i, j, k) = v.at(i, j, k);
  return out;
}

Volume crop(const Volume& v, const Grid& target) {
  const Dims d = target.dims;
  Volume out = Volume::zeros(target, v.unit());
  for (std::size_t k = 0; k < d.nz; ++k)
    for (std::size_t j = 0; j < d.ny; ++j)
      for (std::size_t i = 0; i < d.nx; ++i) out.at(i, j, k) = v.at(i, j, k);
  return out;
}

}  // namespace

Volume forward_field(const Volume& chi, const DipoleKernel& kernel, bool pad) {
  require_same_dims(chi.dims(), kernel.grid.dims, "forward_field");
  if (chi.unit() != Unit::ppm) {
    fail(ErrorCode::unit_mismatch, "forward_field expects chi in ppm, got " +
                                       std::string(unit_name(chi.unit())));
  }
  Volume field;
  if (pad) {
    const Volume padded = pad_double(chi);
    const DipoleKernel big = build_dipole_kernel(padded.grid(), kernel.b0);
    field = crop(apply_kspace_filter(padded, big.values), chi.grid());
  } else {
    field = apply_kspace_filter(chi, kernel.values);
  }
  field.set_b0(kernel.b0);
  return field;
}

Volume simulate_measurement(const Volume& field, const Mask& mask, double snr, std::uint64_t seed) {
  require_same_dims(field.dims(), mask.dims(), "simulate_measurement");
  mask.require_nonempty("simulate_measurement");
  if (!(snr > 0.0)) fail(ErrorCode::invalid_argument, "snr must be > 0 (or infinity)");

  Volume out = apply_mask(field, mask);
  if (std::isinf(snr)) return out;

  double ss = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < field.size(); ++n) {
    if (mask[n]) {
      ss += field[n] * field[n];
      ++count;
    }
  }
  const double sigma = std::sqrt(ss / static_cast<double>(count)) / snr;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (std::size_t n = 0; n < out.size(); ++n) {
    if (mask[n]) out[n] += noise(rng);
  }
  return out;
}

}  // namespace qsm
