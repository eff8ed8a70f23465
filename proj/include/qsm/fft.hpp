#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "qsm/aligned.hpp"
#include "qsm/volume.hpp"

namespace qsm {

using cplx = std::complex<double>;

using CplxBuffer = std::vector<cplx, AlignedAllocator<cplx>>;

struct ComplexVolume {
  Grid grid;
  CplxBuffer data;

  ComplexVolume() = default;
  explicit ComplexVolume(const Grid& g) : grid(g), data(g.count()) {}

  static ComplexVolume from_real(const Volume& v);
  /// Real part as a volume with the given unit tag.
  Volume real(Unit unit) const;

  std::size_t size() const { return data.size(); }
  cplx operator[](std::size_t n) const { return data[n]; }
  cplx& operator[](std::size_t n) { return data[n]; }
};

// Convention: forward is unnormalized, inverse carries the 1/N factor, so
// inverse(forward(x)) == x and sum|x|^2 == sum|X|^2 / N.

ComplexVolume fft3_forward(const Volume& vol);
ComplexVolume fft3_forward(const ComplexVolume& cv);
ComplexVolume fft3_inverse(const ComplexVolume& cv);

/// In-place transforms on a raw buffer laid out x-fastest with the given dims.
void fft3_inplace(CplxBuffer& buf, const Dims& dims, bool inverse);

/// real(ifft(multiplier * fft(v))) for a real, even k-space multiplier.
Volume apply_kspace_filter(const Volume& v, std::span<const double> multiplier);

}  // namespace qsm
