#include "qsm/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qsm {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::dim_mismatch: return "dim_mismatch";
    case ErrorCode::unit_mismatch: return "unit_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::empty_mask: return "empty_mask";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::bad_header: return "bad_header";
    case ErrorCode::invalid_dims: return "invalid_dims";
    case ErrorCode::unknown_unit: return "unknown_unit";
    case ErrorCode::truncated_payload: return "truncated_payload";
    case ErrorCode::payload_mismatch: return "payload_mismatch";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::not_converged: return "not_converged";
    case ErrorCode::diverged: return "diverged";
    case ErrorCode::ill_conditioned: return "ill_conditioned";
    case ErrorCode::shape_rejected: return "shape_rejected";
    case ErrorCode::memory_cap: return "memory_cap";
    case ErrorCode::checkpoint_mismatch: return "checkpoint_mismatch";
  }
  return "unknown";
}

Grid::Grid(Dims d, VoxelSize v) : dims(d), voxel_mm(v) {
  if (d.nx < 1 || d.ny < 1 || d.nz < 1) {
    fail(ErrorCode::invalid_dims, "dims must be >= 1 on every axis, got " + to_string(d));
  }
  const std::size_t limit = std::size_t{1} << 40;
  if (d.nx > limit / d.ny || d.nx * d.ny > limit / d.nz) {
    fail(ErrorCode::invalid_dims, "dims overflow: " + to_string(d));
  }
  if (!(v.dx > 0.0) || !(v.dy > 0.0) || !(v.dz > 0.0) || !std::isfinite(v.dx) ||
      !std::isfinite(v.dy) || !std::isfinite(v.dz)) {
    fail(ErrorCode::invalid_argument, "voxel sizes must be finite and strictly positive");
  }
}

std::string to_string(const Dims& d) {
  std::ostringstream os;
  os << "(" << d.nx << ", " << d.ny << ", " << d.nz << ")";
  return os.str();
}

std::string_view unit_name(Unit u) {
  switch (u) {
    case Unit::ppm: return "ppm";
    case Unit::hz: return "hz";
    case Unit::radians: return "radians";
    case Unit::dimensionless: return "dimensionless";
  }
  return "dimensionless";
}

Unit parse_unit(std::string_view name) {
  if (name == "ppm") return Unit::ppm;
  if (name == "hz") return Unit::hz;
  if (name == "radians") return Unit::radians;
  if (name == "dimensionless") return Unit::dimensionless;
  fail(ErrorCode::unknown_unit, "unknown unit tag '" + std::string(name) + "'");
}

B0Direction B0Direction::from_unit(double x, double y, double z) {
  const double n = std::sqrt(x * x + y * y + z * z);
  if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-9) {
    fail(ErrorCode::invalid_argument, "B0 direction must have unit norm");
  }
  return B0Direction({x, y, z});
}

B0Direction B0Direction::normalized(double x, double y, double z) {
  const double n = std::sqrt(x * x + y * y + z * z);
  if (!std::isfinite(n) || n == 0.0) {
    fail(ErrorCode::invalid_argument, "B0 direction must be a finite nonzero vector");
  }
  return B0Direction({x / n, y / n, z / n});
}

B0Direction B0Direction::from_tilt(double tilt_deg, double azimuth_deg) {
  const double t = tilt_deg * M_PI / 180.0;
  const double p = azimuth_deg * M_PI / 180.0;
  return normalized(std::sin(t) * std::cos(p), std::sin(t) * std::sin(p), std::cos(t));
}

Volume::Volume(Grid grid, Unit unit, std::vector<double> data)
    : grid_(grid), unit_(unit), data_(std::move(data)) {
  if (data_.size() != grid_.count()) {
    fail(ErrorCode::payload_mismatch, "volume data length " + std::to_string(data_.size()) +
                                          " does not match dims " + to_string(grid_.dims));
  }
}

Volume Volume::zeros(Grid grid, Unit unit) { return filled(grid, unit, 0.0); }

Volume Volume::filled(Grid grid, Unit unit, double value) {
  const std::size_t n = grid.count();
  return Volume(grid, unit, std::vector<double>(n, value));
}

Volume Volume::relabeled(Unit unit) const {
  Volume out = *this;
  out.unit_ = unit;
  return out;
}

void Volume::check_compatible(const Volume& rhs) const {
  require_same_dims(dims(), rhs.dims(), "volume arithmetic");
  if (unit_ != rhs.unit_) {
    fail(ErrorCode::unit_mismatch, "mixed-unit arithmetic: " + std::string(unit_name(unit_)) +
                                       " vs " + std::string(unit_name(rhs.unit_)));
  }
}

Volume& Volume::operator+=(const Volume& rhs) {
  check_compatible(rhs);
  for (std::size_t n = 0; n < data_.size(); ++n) data_[n] += rhs.data_[n];
  return *this;
}

Volume& Volume::operator-=(const Volume& rhs) {
  check_compatible(rhs);
  for (std::size_t n = 0; n < data_.size(); ++n) data_[n] -= rhs.data_[n];
  return *this;
}

Volume& Volume::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

Mask Mask::from_volume(Volume v) {
  for (double x : v.data()) {
    if (x != 0.0 && x != 1.0) fail(ErrorCode::invalid_argument, "mask values must be 0 or 1");
  }
  // normalize -0.0 so equality on payloads is exact
  for (double& x : v.data()) x = (x == 1.0) ? 1.0 : 0.0;
  return Mask(v.relabeled(Unit::dimensionless));
}

Mask Mask::threshold(const Volume& v, double level) {
  Volume out = Volume::zeros(v.grid(), Unit::dimensionless);
  for (std::size_t n = 0; n < v.size(); ++n) out[n] = v[n] > level ? 1.0 : 0.0;
  return Mask(std::move(out));
}

Mask Mask::full(const Grid& grid) { return Mask(Volume::filled(grid, Unit::dimensionless, 1.0)); }

Mask Mask::empty(const Grid& grid) { return Mask(Volume::zeros(grid, Unit::dimensionless)); }

std::size_t Mask::count() const {
  return static_cast<std::size_t>(
      std::count_if(vol_.data().begin(), vol_.data().end(), [](double x) { return x != 0.0; }));
}

const Mask& Mask::require_nonempty(std::string_view what) const {
  if (count() == 0) fail(ErrorCode::empty_mask, std::string(what) + ": mask is empty");
  return *this;
}

bool Mask::is_subset_of(const Mask& other) const {
  require_same_dims(dims(), other.dims(), "mask subset");
  for (std::size_t n = 0; n < size(); ++n) {
    if ((*this)[n] && !other[n]) return false;
  }
  return true;
}

Volume apply_mask(const Volume& v, const Mask& m) {
  require_same_dims(v.dims(), m.dims(), "apply_mask");
  Volume out = v;
  for (std::size_t n = 0; n < out.size(); ++n) {
    if (!m[n]) out[n] = 0.0;
  }
  return out;
}

void require_same_dims(const Dims& a, const Dims& b, std::string_view what) {
  if (!(a == b)) {
    fail(ErrorCode::dim_mismatch,
         std::string(what) + ": dims " + to_string(a) + " vs " + to_string(b));
  }
}

void require_finite(std::span<const double> data, std::string_view what) {
  for (double x : data) {
    if (!std::isfinite(x)) fail(ErrorCode::non_finite, std::string(what) + ": non-finite value");
  }
}

std::vector<double> fftfreq(std::size_t n, double d) {
  std::vector<double> k(n);
  const auto sn = static_cast<long long>(n);
  for (long long i = 0; i < sn; ++i) {
    const long long f = (i <= (sn - 1) / 2) ? i : i - sn;
    k[static_cast<std::size_t>(i)] = static_cast<double>(f) / (static_cast<double>(n) * d);
  }
  return k;
}

KGrid KGrid::build(const Grid& grid) {
  return KGrid{fftfreq(grid.dims.nx, grid.voxel_mm.dx), fftfreq(grid.dims.ny, grid.voxel_mm.dy),
               fftfreq(grid.dims.nz, grid.voxel_mm.dz)};
}

}  // namespace qsm
