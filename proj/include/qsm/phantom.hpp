#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "qsm/volume.hpp"

namespace qsm {

enum class ShapeKind { ellipsoid, sphere, cuboid, cylinder };

std::string_view shape_name(ShapeKind k);
ShapeKind parse_shape(std::string_view name);

struct ElasticParams {
  double grid_spacing_vox = 8.0;
  double max_displacement_vox = 4.0;
};

struct ContrastParams {
  int n_blobs = 3;
  double gain_lo = 0.75;
  double gain_hi = 1.5;
};

struct PhantomSpec {
  Grid grid{Dims{64, 64, 64}, VoxelSize{1.0, 1.0, 1.0}};
  std::uint64_t seed = 0;
  int n_shapes = 8;
  std::vector<ShapeKind> shape_kinds{ShapeKind::ellipsoid, ShapeKind::sphere, ShapeKind::cuboid,
                                     ShapeKind::cylinder};
  double chi_lo = -1.0;
  double chi_hi = 1.0;
  /// Semi-axis / radius / half-edge range in voxels; hi <= 0 means min(dims)/8.
  double shape_size_lo = 2.0;
  double shape_size_hi = 0.0;
  ElasticParams elastic;
  ContrastParams contrast;
  B0Direction b0;
  /// Seed susceptibility map (ppm). When absent a procedural tissue-like base is used.
  std::optional<Volume> base;

  /// Throws invalid_argument on violated invariants.
  void validate() const;
  double resolved_shape_size_hi() const;
};

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

struct PhantomPair {
  Volume chi_true;
  Volume local_field;
  Mask mask;
  B0Direction b0;
  PhantomSpec provenance;
};

/// A single rigid geometric inclusion. `half_extent` holds semi-axes for
/// ellipsoids, (r, r, r) for spheres, half-edges for cuboids and
/// (r, r, half-height) for cylinders.
struct Shape {
  ShapeKind kind = ShapeKind::sphere;
  std::array<double, 3> center{};
  std::array<double, 3> half_extent{};
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, local -> grid
  double value = 0.0;

  bool contains(double x, double y, double z) const;
  /// Radius of a sphere enclosing the shape.
  double bounding_radius() const;
};

/// Overwrites every voxel inside the shape with its value. Returns the voxel count painted.
std::size_t paint_shape(Volume& chi, const Shape& shape);

/// Stream derivation used everywhere a stage or item needs its own RNG.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

Volume elastic_transform(const Volume& vol, double grid_spacing_vox, double max_displacement_vox,
                         std::uint64_t seed);

/// Draws spec.n_shapes shapes from the seeded stream and paints them in order.
Volume insert_random_shapes(const Volume& chi, const PhantomSpec& spec, std::uint64_t seed,
                            std::vector<Shape>* drawn = nullptr);

Volume local_contrast_change(const Volume& chi, int n_blobs, double gain_lo, double gain_hi,
                             std::uint64_t seed);
/// The multiplicative gain field used by local_contrast_change.
Volume contrast_gain_field(const Grid& grid, int n_blobs, double gain_lo, double gain_hi,
                           std::uint64_t seed);

/// Smooth Gaussian-blob tissue base inside an ellipsoidal brain mask.
std::pair<Volume, Mask> procedural_base(const Grid& grid, std::uint64_t seed);

PhantomPair generate_phantom(const PhantomSpec& spec);

/// Recomputes the local field from a stored pair and returns max |difference|.
double resimulation_error(const PhantomPair& pair);

/// Checks every PhantomPair invariant; returns an empty string when all hold.
std::string check_phantom_invariants(const PhantomPair& pair);

}  // namespace qsm
