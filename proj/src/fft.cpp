#include "qsm/fft.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace qsm {
namespace {

// The FFTW planner is not thread-safe, execution of an existing plan on new
// arrays is. Plans are created once per (dims, direction) with FFTW_ESTIMATE,
// which keeps the chosen algorithm, and thus the bits, identical across runs.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(const Dims& d, bool inverse) {
    const auto key = std::make_tuple(d.nx, d.ny, d.nz, inverse);
    std::lock_guard lock(mu_);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    CplxBuffer scratch(d.count());
    auto* p = reinterpret_cast<fftw_complex*>(scratch.data());
    // FFTW takes the slowest axis first; our x-fastest layout is (nz, ny, nx).
    fftw_plan plan = fftw_plan_dft_3d(static_cast<int>(d.nz), static_cast<int>(d.ny),
                                      static_cast<int>(d.nx), p, p,
                                      inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
    if (plan == nullptr) fail(ErrorCode::invalid_dims, "FFT planning failed for " + to_string(d));
    plans_.emplace(key, plan);
    return plan;
  }

 private:
  std::mutex mu_;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t, bool>, fftw_plan> plans_;
};

void check_fft_dims(const Dims& d) {
  const std::size_t int_max = 0x7fffffff;
  if (d.nx > int_max || d.ny > int_max || d.nz > int_max || d.count() > (std::size_t{1} << 34)) {
    fail(ErrorCode::invalid_dims, "FFT dimension overflow: " + to_string(d));
  }
}

}  // namespace

ComplexVolume ComplexVolume::from_real(const Volume& v) {
  ComplexVolume cv(v.grid());
  for (std::size_t n = 0; n < v.size(); ++n) cv.data[n] = cplx(v[n], 0.0);
  return cv;
}

Volume ComplexVolume::real(Unit unit) const {
  Volume out = Volume::zeros(grid, unit);
  for (std::size_t n = 0; n < data.size(); ++n) out[n] = data[n].real();
  return out;
}

void fft3_inplace(CplxBuffer& buf, const Dims& dims, bool inverse) {
  check_fft_dims(dims);
  if (buf.size() != dims.count()) fail(ErrorCode::dim_mismatch, "FFT buffer size mismatch");
  fftw_plan plan = PlanCache::instance().get(dims, inverse);
  auto* p = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_execute_dft(plan, p, p);
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(dims.count());
    for (auto& c : buf) c *= scale;
  }
}

ComplexVolume fft3_forward(const Volume& vol) {
  require_finite(vol.data(), "fft3_forward");
  ComplexVolume cv = ComplexVolume::from_real(vol);
  fft3_inplace(cv.data, cv.grid.dims, false);
  return cv;
}

ComplexVolume fft3_forward(const ComplexVolume& cv) {
  for (const cplx& c : cv.data) {
    if (!std::isfinite(c.real()) || !std::isfinite(c.imag())) {
      fail(ErrorCode::non_finite, "fft3_forward: non-finite value");
    }
  }
  ComplexVolume out = cv;
  fft3_inplace(out.data, out.grid.dims, false);
  return out;
}

ComplexVolume fft3_inverse(const ComplexVolume& cv) {
  for (const cplx& c : cv.data) {
    if (!std::isfinite(c.real()) || !std::isfinite(c.imag())) {
      fail(ErrorCode::non_finite, "fft3_inverse: non-finite value");
    }
  }
  ComplexVolume out = cv;
  fft3_inplace(out.data, out.grid.dims, true);
  return out;
}

Volume apply_kspace_filter(const Volume& v, std::span<const double> multiplier) {
  if (multiplier.size() != v.size()) fail(ErrorCode::dim_mismatch, "k-space filter size mismatch");
  ComplexVolume cv = ComplexVolume::from_real(v);
  fft3_inplace(cv.data, cv.grid.dims, false);
  for (std::size_t n = 0; n < cv.size(); ++n) cv.data[n] *= multiplier[n];
  fft3_inplace(cv.data, cv.grid.dims, true);
  Volume out = cv.real(v.unit());
  out.set_b0(v.b0());
  return out;
}

}  // namespace qsm
