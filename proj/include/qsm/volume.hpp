#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qsm/error.hpp"

namespace qsm {

struct Dims {
  std::size_t nx = 1;
  std::size_t ny = 1;
  std::size_t nz = 1;

  std::size_t count() const { return nx * ny * nz; }
  bool operator==(const Dims&) const = default;
};

struct VoxelSize {
  double dx = 1.0;
  double dy = 1.0;
  double dz = 1.0;

  bool operator==(const VoxelSize&) const = default;
};

/// Voxel geometry shared by every volume type. Linear order is x-fastest.
struct Grid {
  Dims dims;
  VoxelSize voxel_mm;

  Grid() = default;
  Grid(Dims d, VoxelSize v = {});

  std::size_t count() const { return dims.count(); }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + dims.nx * (j + dims.ny * k);
  }
  bool operator==(const Grid&) const = default;
};

std::string to_string(const Dims& d);

enum class Unit { ppm, hz, radians, dimensionless };

std::string_view unit_name(Unit u);
Unit parse_unit(std::string_view name);

/// Main-field direction; always unit length.
class B0Direction {
 public:
  B0Direction() = default;

  /// Rejects vectors whose norm differs from 1 by more than 1e-9.
  static B0Direction from_unit(double x, double y, double z);
  /// Normalizes any nonzero vector.
  static B0Direction normalized(double x, double y, double z);
  /// Direction from polar tilt (degrees away from +z) and azimuth (degrees).
  static B0Direction from_tilt(double tilt_deg, double azimuth_deg = 0.0);

  double x() const { return v_[0]; }
  double y() const { return v_[1]; }
  double z() const { return v_[2]; }
  const std::array<double, 3>& vec() const { return v_; }
  bool operator==(const B0Direction&) const = default;

 private:
  explicit B0Direction(std::array<double, 3> v) : v_(v) {}
  std::array<double, 3> v_{0.0, 0.0, 1.0};
};

class Volume {
 public:
  Volume() = default;
  Volume(Grid grid, Unit unit, std::vector<double> data);

  static Volume zeros(Grid grid, Unit unit);
  static Volume filled(Grid grid, Unit unit, double value);

  const Grid& grid() const { return grid_; }
  const Dims& dims() const { return grid_.dims; }
  const VoxelSize& voxel_mm() const { return grid_.voxel_mm; }
  std::size_t size() const { return data_.size(); }
  Unit unit() const { return unit_; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t n) const { return data_[n]; }
  double& operator[](std::size_t n) { return data_[n]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const { return data_[grid_.index(i, j, k)]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) { return data_[grid_.index(i, j, k)]; }

  const std::optional<B0Direction>& b0() const { return b0_; }
  void set_b0(std::optional<B0Direction> b0) { b0_ = b0; }

  /// Same geometry and metadata, new unit tag. Used for explicit conversions.
  Volume relabeled(Unit unit) const;

  Volume& operator+=(const Volume& rhs);
  Volume& operator-=(const Volume& rhs);
  Volume& operator*=(double s);

  friend Volume operator+(Volume a, const Volume& b) { return a += b; }
  friend Volume operator-(Volume a, const Volume& b) { return a -= b; }
  friend Volume operator*(Volume a, double s) { return a *= s; }
  friend Volume operator*(double s, Volume a) { return a *= s; }

 private:
  void check_compatible(const Volume& rhs) const;

  Grid grid_;
  Unit unit_ = Unit::dimensionless;
  std::vector<double> data_{0.0};
  std::optional<B0Direction> b0_;
};

/// Binary dimensionless volume.
class Mask {
 public:
  Mask() = default;

  /// Validates that every value is exactly 0 or 1.
  static Mask from_volume(Volume v);
  /// Thresholds at > 0.5.
  static Mask threshold(const Volume& v, double level = 0.5);
  static Mask full(const Grid& grid);
  static Mask empty(const Grid& grid);

  const Volume& volume() const { return vol_; }
  const Grid& grid() const { return vol_.grid(); }
  const Dims& dims() const { return vol_.dims(); }
  std::size_t size() const { return vol_.size(); }
  bool operator[](std::size_t n) const { return vol_[n] != 0.0; }
  bool at(std::size_t i, std::size_t j, std::size_t k) const { return vol_.at(i, j, k) != 0.0; }
  void set(std::size_t n, bool on) { vol_[n] = on ? 1.0 : 0.0; }

  std::size_t count() const;
  /// Throws empty_mask when no voxel is set.
  const Mask& require_nonempty(std::string_view what) const;
  bool is_subset_of(const Mask& other) const;
  bool operator==(const Mask& other) const { return vol_.values() == other.vol_.values(); }

 private:
  explicit Mask(Volume v) : vol_(std::move(v)) {}
  Volume vol_;
};

/// v * mask, keeping v's unit.
Volume apply_mask(const Volume& v, const Mask& m);

void require_same_dims(const Dims& a, const Dims& b, std::string_view what);
void require_finite(std::span<const double> data, std::string_view what);

/// Per-axis discrete frequencies in cycles/mm, unshifted layout.
struct KGrid {
  std::vector<double> kx, ky, kz;

  static KGrid build(const Grid& grid);
};

/// numpy-style fftfreq(n) / d.
std::vector<double> fftfreq(std::size_t n, double d);

}  // namespace qsm
