#include "qsm/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "qsm/dipole.hpp"

namespace qsm {
namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::array<double, 9> random_rotation(Rng& rng) {
  // Shoemake's uniform random unit quaternion.
  const double u1 = uniform(rng, 0.0, 1.0), u2 = uniform(rng, 0.0, 2.0 * M_PI),
               u3 = uniform(rng, 0.0, 2.0 * M_PI);
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double w = a * std::sin(u2), x = a * std::cos(u2), y = b * std::sin(u3),
               z = b * std::cos(u3);
  return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
          2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
          2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

double min_dim(const Grid& g) {
  return static_cast<double>(std::min({g.dims.nx, g.dims.ny, g.dims.nz}));
}

// Trilinear sample with zero extension outside [0, n-1].
double sample_zero_ext(const Volume& v, double x, double y, double z) {
  const Dims d = v.dims();
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const long ix = static_cast<long>(fx), iy = static_cast<long>(fy), iz = static_cast<long>(fz);
  const double tx = x - fx, ty = y - fy, tz = z - fz;
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const long px = ix + (c & 1), py = iy + ((c >> 1) & 1), pz = iz + ((c >> 2) & 1);
    const double w = ((c & 1) ? tx : 1.0 - tx) * (((c >> 1) & 1) ? ty : 1.0 - ty) *
                     (((c >> 2) & 1) ? tz : 1.0 - tz);
    if (w == 0.0) continue;
    if (px < 0 || py < 0 || pz < 0 || px >= static_cast<long>(d.nx) ||
        py >= static_cast<long>(d.ny) || pz >= static_cast<long>(d.nz)) {
      continue;
    }
    acc += w * v.at(static_cast<std::size_t>(px), static_cast<std::size_t>(py),
                    static_cast<std::size_t>(pz));
  }
  return acc;
}

}  // namespace

std::string_view shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::ellipsoid: return "ellipsoid";
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cuboid: return "cuboid";
    case ShapeKind::cylinder: return "cylinder";
  }
  return "sphere";
}

ShapeKind parse_shape(std::string_view name) {
  if (name == "ellipsoid") return ShapeKind::ellipsoid;
  if (name == "sphere") return ShapeKind::sphere;
  if (name == "cuboid") return ShapeKind::cuboid;
  if (name == "cylinder") return ShapeKind::cylinder;
  fail(ErrorCode::invalid_argument, "unknown shape kind '" + std::string(name) + "'");
}

double PhantomSpec::resolved_shape_size_hi() const {
  return shape_size_hi > 0.0 ? shape_size_hi : std::max(shape_size_lo, min_dim(grid) / 8.0);
}

void PhantomSpec::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorCode::invalid_argument, "PhantomSpec: " + msg); };
  if (!(chi_lo < chi_hi)) bad("susceptibility range needs lo < hi");
  if (n_shapes < 0) bad("n_shapes must be >= 0");
  if (n_shapes > 0 && shape_kinds.empty()) bad("shape_kinds is empty");
  if (!(shape_size_lo > 0.0) || resolved_shape_size_hi() < shape_size_lo) {
    bad("shape size range must satisfy 0 < lo <= hi");
  }
  if (!(elastic.grid_spacing_vox >= 2.0)) bad("elastic grid spacing must be >= 2 voxels");
  if (!(elastic.max_displacement_vox >= 0.0)) bad("elastic max displacement must be >= 0");
  if (contrast.n_blobs < 0) bad("contrast n_blobs must be >= 0");
  if (!(contrast.gain_lo > 0.0) || !(contrast.gain_lo <= contrast.gain_hi)) {
    bad("gain range must satisfy 0 < lo <= hi");
  }
  // Keeps the additive gain field strictly positive wherever the blobs overlap.
  if (contrast.n_blobs * std::max(0.0, 1.0 - contrast.gain_lo) >= 1.0) {
    bad("n_blobs * (1 - gain_lo) must be < 1 so the gain field stays positive");
  }
  if (base) {
    require_same_dims(base->dims(), grid.dims, "PhantomSpec base");
    if (base->unit() != Unit::ppm) bad("base volume must be in ppm");
  }
}

nlohmann::json to_json(const PhantomSpec& s) {
  nlohmann::json j;
  j["dims"] = {s.grid.dims.nx, s.grid.dims.ny, s.grid.dims.nz};
  j["voxel_size_mm"] = {s.grid.voxel_mm.dx, s.grid.voxel_mm.dy, s.grid.voxel_mm.dz};
  j["seed"] = s.seed;
  j["n_shapes"] = s.n_shapes;
  nlohmann::json kinds = nlohmann::json::array();
  for (ShapeKind k : s.shape_kinds) kinds.push_back(std::string(shape_name(k)));
  j["shape_kinds"] = kinds;
  j["susceptibility_range_ppm"] = {s.chi_lo, s.chi_hi};
  j["shape_size_vox"] = {s.shape_size_lo, s.resolved_shape_size_hi()};
  j["elastic"] = {{"grid_spacing_vox", s.elastic.grid_spacing_vox},
                  {"max_displacement_vox", s.elastic.max_displacement_vox}};
  j["contrast"] = {{"n_blobs", s.contrast.n_blobs},
                   {"gain_range", {s.contrast.gain_lo, s.contrast.gain_hi}}};
  j["b0_dir"] = {s.b0.x(), s.b0.y(), s.b0.z()};
  j["base"] = s.base ? "supplied" : "procedural";
  return j;
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    const auto& d = j.at("dims");
    const auto& v = j.at("voxel_size_mm");
    s.grid = Grid({d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()},
                  {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()});
    s.seed = j.at("seed").get<std::uint64_t>();
    s.n_shapes = j.at("n_shapes").get<int>();
    s.shape_kinds.clear();
    for (const auto& k : j.at("shape_kinds")) s.shape_kinds.push_back(parse_shape(k.get<std::string>()));
    s.chi_lo = j.at("susceptibility_range_ppm")[0].get<double>();
    s.chi_hi = j.at("susceptibility_range_ppm")[1].get<double>();
    s.shape_size_lo = j.at("shape_size_vox")[0].get<double>();
    s.shape_size_hi = j.at("shape_size_vox")[1].get<double>();
    s.elastic.grid_spacing_vox = j.at("elastic").at("grid_spacing_vox").get<double>();
    s.elastic.max_displacement_vox = j.at("elastic").at("max_displacement_vox").get<double>();
    s.contrast.n_blobs = j.at("contrast").at("n_blobs").get<int>();
    s.contrast.gain_lo = j.at("contrast").at("gain_range")[0].get<double>();
    s.contrast.gain_hi = j.at("contrast").at("gain_range")[1].get<double>();
    const auto& b = j.at("b0_dir");
    s.b0 = B0Direction::from_unit(b[0].get<double>(), b[1].get<double>(), b[2].get<double>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad phantom spec JSON: ") + e.what());
  }
  return s;
}

bool Shape::contains(double x, double y, double z) const {
  const double px = x - center[0], py = y - center[1], pz = z - center[2];
  const auto& r = rotation;
  // local = R^T * p
  const double lx = r[0] * px + r[3] * py + r[6] * pz;
  const double ly = r[1] * px + r[4] * py + r[7] * pz;
  const double lz = r[2] * px + r[5] * py + r[8] * pz;
  const auto& h = half_extent;
  switch (kind) {
    case ShapeKind::sphere:
      return lx * lx + ly * ly + lz * lz <= h[0] * h[0];
    case ShapeKind::ellipsoid: {
      const double a = lx / h[0], b = ly / h[1], c = lz / h[2];
      return a * a + b * b + c * c <= 1.0;
    }
    case ShapeKind::cuboid:
      return std::abs(lx) <= h[0] && std::abs(ly) <= h[1] && std::abs(lz) <= h[2];
    case ShapeKind::cylinder: {
      const double a = lx / h[0], b = ly / h[1];
      return a * a + b * b <= 1.0 && std::abs(lz) <= h[2];
    }
  }
  return false;
}

double Shape::bounding_radius() const {
  const auto& h = half_extent;
  switch (kind) {
    case ShapeKind::sphere:
    case ShapeKind::ellipsoid: return std::max({h[0], h[1], h[2]});
    case ShapeKind::cuboid: return std::sqrt(h[0] * h[0] + h[1] * h[1] + h[2] * h[2]);
    case ShapeKind::cylinder: return std::sqrt(std::max(h[0], h[1]) * std::max(h[0], h[1]) + h[2] * h[2]);
  }
  return 0.0;
}

std::size_t paint_shape(Volume& chi, const Shape& shape) {
  const Dims d = chi.dims();
  const double r = shape.bounding_radius();
  auto range = [r](double c, std::size_t n) {
    const long lo = std::max(0L, static_cast<long>(std::floor(c - r)));
    const long hi = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(c + r)));
    return std::pair{lo, hi};
  };
  const auto [x0, x1] = range(shape.center[0], d.nx);
  const auto [y0, y1] = range(shape.center[1], d.ny);
  const auto [z0, z1] = range(shape.center[2], d.nz);
  std::size_t painted = 0;
  for (long k = z0; k <= z1; ++k)
    for (long j = y0; j <= y1; ++j)
      for (long i = x0; i <= x1; ++i) {
        if (shape.contains(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k))) {
          chi.at(i, j, k) = shape.value;
          ++painted;
        }
      }
  return painted;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  // splitmix64 finalizer over a mixed (master, stream) pair
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Volume elastic_transform(const Volume& vol, double grid_spacing_vox, double max_displacement_vox,
                         std::uint64_t seed) {
  if (!(grid_spacing_vox >= 2.0)) fail(ErrorCode::invalid_argument, "grid spacing must be >= 2");
  if (!(max_displacement_vox >= 0.0)) fail(ErrorCode::invalid_argument, "max displacement must be >= 0");
  const Dims d = vol.dims();
  const double s = grid_spacing_vox;
  auto ctrl = [s](std::size_t n) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n - 1) / s)) + 2;
  };
  const std::size_t cx = ctrl(d.nx), cy = ctrl(d.ny), cz = ctrl(d.nz);
  std::vector<std::array<double, 3>> disp(cx * cy * cz);
  Rng rng(seed);
  for (auto& u : disp) {
    for (double& c : u) c = uniform(rng, -max_displacement_vox, max_displacement_vox);
  }
  // With zero amplitude the draws above still happen so the stream layout is fixed.
  if (max_displacement_vox == 0.0) return vol;

  Volume out = Volume::zeros(vol.grid(), vol.unit());
  out.set_b0(vol.b0());
  for (std::size_t k = 0; k < d.nz; ++k) {
    const double gz = static_cast<double>(k) / s;
    const std::size_t kz = static_cast<std::size_t>(gz);
    const double tz = gz - static_cast<double>(kz);
    for (std::size_t j = 0; j < d.ny; ++j) {
      const double gy = static_cast<double>(j) / s;
      const std::size_t ky = static_cast<std::size_t>(gy);
      const double ty = gy - static_cast<double>(ky);
      for (std::size_t i = 0; i < d.nx; ++i) {
        const double gx = static_cast<double>(i) / s;
        const std::size_t kx = static_cast<std::size_t>(gx);
        const double tx = gx - static_cast<double>(kx);
        std::array<double, 3> u{0.0, 0.0, 0.0};
        for (int c = 0; c < 8; ++c) {
          const std::size_t px = kx + (c & 1), py = ky + ((c >> 1) & 1), pz = kz + ((c >> 2) & 1);
          const double w = ((c & 1) ? tx : 1.0 - tx) * (((c >> 1) & 1) ? ty : 1.0 - ty) *
                           (((c >> 2) & 1) ? tz : 1.0 - tz);
          const auto& dv = disp[px + cx * (py + cy * pz)];
          for (int a = 0; a < 3; ++a) u[a] += w * dv[a];
        }
        out.at(i, j, k) = sample_zero_ext(vol, static_cast<double>(i) + u[0],
                                          static_cast<double>(j) + u[1],
                                          static_cast<double>(k) + u[2]);
      }
    }
  }
  return out;
}

Volume insert_random_shapes(const Volume& chi, const PhantomSpec& spec, std::uint64_t seed,
                            std::vector<Shape>* drawn) {
  if (spec.n_shapes < 0) fail(ErrorCode::invalid_argument, "n_shapes must be >= 0");
  Volume out = chi;
  if (spec.n_shapes == 0) return out;
  if (spec.shape_kinds.empty()) fail(ErrorCode::invalid_argument, "no shape kinds to draw from");

  constexpr int kRetryCap = 100;
  const Dims d = chi.dims();
  const double size_lo = spec.shape_size_lo, size_hi = spec.resolved_shape_size_hi();
  Rng rng(seed);
  for (int s = 0; s < spec.n_shapes; ++s) {
    Shape shape;
    bool placed = false;
    for (int attempt = 0; attempt < kRetryCap && !placed; ++attempt) {
      const auto pick = std::uniform_int_distribution<std::size_t>(0, spec.shape_kinds.size() - 1)(rng);
      shape.kind = spec.shape_kinds[pick];
      switch (shape.kind) {
        case ShapeKind::sphere: {
          const double r = uniform(rng, size_lo, size_hi);
          shape.half_extent = {r, r, r};
          break;
        }
        case ShapeKind::cylinder: {
          const double r = uniform(rng, size_lo, size_hi);
          shape.half_extent = {r, r, uniform(rng, size_lo, size_hi)};
          break;
        }
        default:
          shape.half_extent = {uniform(rng, size_lo, size_hi), uniform(rng, size_lo, size_hi),
                               uniform(rng, size_lo, size_hi)};
      }
      shape.center = {uniform(rng, 0.0, static_cast<double>(d.nx - 1)),
                      uniform(rng, 0.0, static_cast<double>(d.ny - 1)),
                      uniform(rng, 0.0, static_cast<double>(d.nz - 1))};
      shape.rotation = random_rotation(rng);
      const double r = shape.bounding_radius();
      placed = shape.center[0] - r >= 0.0 && shape.center[1] - r >= 0.0 &&
               shape.center[2] - r >= 0.0 && shape.center[0] + r <= static_cast<double>(d.nx - 1) &&
               shape.center[1] + r <= static_cast<double>(d.ny - 1) &&
               shape.center[2] + r <= static_cast<double>(d.nz - 1);
    }
    if (!placed) {
      fail(ErrorCode::shape_rejected, "shape " + std::to_string(s) + " did not fit the volume after " +
                                          std::to_string(kRetryCap) + " draws");
    }
    shape.value = uniform(rng, spec.chi_lo, spec.chi_hi);
    paint_shape(out, shape);
    if (drawn) drawn->push_back(shape);
  }
  return out;
}

Volume contrast_gain_field(const Grid& grid, int n_blobs, double gain_lo, double gain_hi,
                           std::uint64_t seed) {
  if (!(gain_lo > 0.0) || !(gain_lo <= gain_hi)) {
    fail(ErrorCode::invalid_argument, "gain range must satisfy 0 < lo <= hi");
  }
  const Dims d = grid.dims;
  Volume g = Volume::filled(grid, Unit::dimensionless, 1.0);
  Rng rng(seed);
  const double m = min_dim(grid);
  for (int b = 0; b < n_blobs; ++b) {
    const double a = uniform(rng, gain_lo, gain_hi);
    const double cx = uniform(rng, 0.0, static_cast<double>(d.nx - 1));
    const double cy = uniform(rng, 0.0, static_cast<double>(d.ny - 1));
    const double cz = uniform(rng, 0.0, static_cast<double>(d.nz - 1));
    const double sigma = uniform(rng, m / 10.0, m / 4.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    std::size_t n = 0;
    for (std::size_t k = 0; k < d.nz; ++k)
      for (std::size_t j = 0; j < d.ny; ++j)
        for (std::size_t i = 0; i < d.nx; ++i, ++n) {
          const double dx = static_cast<double>(i) - cx, dy = static_cast<double>(j) - cy,
                       dz = static_cast<double>(k) - cz;
          g[n] += (a - 1.0) * std::exp(-(dx * dx + dy * dy + dz * dz) * inv);
        }
  }
  return g;
}

Volume local_contrast_change(const Volume& chi, int n_blobs, double gain_lo, double gain_hi,
                             std::uint64_t seed) {
  if (n_blobs < 0) fail(ErrorCode::invalid_argument, "n_blobs must be >= 0");
  Volume out = chi;
  if (n_blobs == 0) return out;
  const Volume g = contrast_gain_field(chi.grid(), n_blobs, gain_lo, gain_hi, seed);
  for (std::size_t n = 0; n < out.size(); ++n) out[n] *= g[n];
  return out;
}

std::pair<Volume, Mask> procedural_base(const Grid& grid, std::uint64_t seed) {
  const Dims d = grid.dims;
  Rng rng(seed);
  const double cx = 0.5 * static_cast<double>(d.nx - 1), cy = 0.5 * static_cast<double>(d.ny - 1),
               cz = 0.5 * static_cast<double>(d.nz - 1);
  const double ax = uniform(rng, 0.36, 0.42) * static_cast<double>(d.nx);
  const double ay = uniform(rng, 0.32, 0.38) * static_cast<double>(d.ny);
  const double az = uniform(rng, 0.30, 0.36) * static_cast<double>(d.nz);

  Mask mask = Mask::empty(grid);
  std::size_t n = 0;
  for (std::size_t k = 0; k < d.nz; ++k)
    for (std::size_t j = 0; j < d.ny; ++j)
      for (std::size_t i = 0; i < d.nx; ++i, ++n) {
        const double x = (static_cast<double>(i) - cx) / ax, y = (static_cast<double>(j) - cy) / ay,
                     z = (static_cast<double>(k) - cz) / az;
        mask.set(n, x * x + y * y + z * z <= 1.0);
      }

  Volume base = Volume::zeros(grid, Unit::ppm);
  const double m = min_dim(grid);
  constexpr int kBlobs = 16;
  for (int b = 0; b < kBlobs; ++b) {
    const double amp = uniform(rng, -0.2, 0.2);
    const double bx = cx + ax * uniform(rng, -0.8, 0.8), by = cy + ay * uniform(rng, -0.8, 0.8),
                 bz = cz + az * uniform(rng, -0.8, 0.8);
    const double sigma = uniform(rng, m / 16.0, m / 6.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    n = 0;
    for (std::size_t k = 0; k < d.nz; ++k)
      for (std::size_t j = 0; j < d.ny; ++j)
        for (std::size_t i = 0; i < d.nx; ++i, ++n) {
          const double dx = static_cast<double>(i) - bx, dy = static_cast<double>(j) - by,
                       dz = static_cast<double>(k) - bz;
          base[n] += amp * std::exp(-(dx * dx + dy * dy + dz * dz) * inv);
        }
  }
  double peak = 0.0;
  for (double v : base.data()) peak = std::max(peak, std::abs(v));
  if (peak > 0.2) base *= 0.2 / peak;
  return {apply_mask(base, mask), mask};
}

PhantomPair generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const std::uint64_t s_base = derive_seed(spec.seed, 1), s_elastic = derive_seed(spec.seed, 2),
                      s_shapes = derive_seed(spec.seed, 3), s_contrast = derive_seed(spec.seed, 4);

  Volume base;
  Mask mask0;
  if (spec.base) {
    base = *spec.base;
    mask0 = Mask::threshold(base.relabeled(Unit::dimensionless), 0.0);
    Volume neg = base.relabeled(Unit::dimensionless) * -1.0;
    const Mask below = Mask::threshold(neg, 0.0);
    for (std::size_t n = 0; n < mask0.size(); ++n) mask0.set(n, mask0[n] || below[n]);
    mask0.require_nonempty("phantom base support");
  } else {
    std::tie(base, mask0) = procedural_base(spec.grid, s_base);
  }

  const double sp = spec.elastic.grid_spacing_vox, md = spec.elastic.max_displacement_vox;
  Volume chi = elastic_transform(base, sp, md, s_elastic);
  const Mask mask = Mask::threshold(elastic_transform(mask0.volume(), sp, md, s_elastic), 0.5);
  mask.require_nonempty("warped brain mask");

  chi = insert_random_shapes(chi, spec, s_shapes);
  chi = local_contrast_change(chi, spec.contrast.n_blobs, spec.contrast.gain_lo,
                              spec.contrast.gain_hi, s_contrast);
  chi = apply_mask(chi.relabeled(Unit::ppm), mask);
  chi.set_b0(spec.b0);

  const DipoleKernel kernel = build_dipole_kernel(spec.grid, spec.b0);
  Volume field = forward_field(chi, kernel, true);

  return PhantomPair{std::move(chi), std::move(field), mask, spec.b0, spec};
}

double resimulation_error(const PhantomPair& pair) {
  const DipoleKernel kernel = build_dipole_kernel(pair.chi_true.grid(), pair.b0);
  const Volume again = forward_field(pair.chi_true, kernel, true);
  double err = 0.0;
  for (std::size_t n = 0; n < again.size(); ++n) {
    err = std::max(err, std::abs(again[n] - pair.local_field[n]));
  }
  return err;
}

std::string check_phantom_invariants(const PhantomPair& pair) {
  if (!(pair.chi_true.dims() == pair.local_field.dims()) || !(pair.chi_true.dims() == pair.mask.dims())) {
    return "dims differ between chi, field and mask";
  }
  if (pair.chi_true.unit() != Unit::ppm || pair.local_field.unit() != Unit::ppm) {
    return "chi and field must be in ppm";
  }
  if (pair.mask.count() == 0) return "mask is empty";
  for (std::size_t n = 0; n < pair.chi_true.size(); ++n) {
    if (!pair.mask[n] && pair.chi_true[n] != 0.0) return "chi_true nonzero outside mask";
    if (!std::isfinite(pair.chi_true[n]) || !std::isfinite(pair.local_field[n])) {
      return "non-finite value";
    }
  }
  const PhantomSpec& s = pair.provenance;
  const double gain_max = 1.0 + s.contrast.n_blobs * std::max(0.0, s.contrast.gain_hi - 1.0);
  double base_peak = 0.2;
  if (s.base) {
    base_peak = 0.0;
    for (double v : s.base->data()) base_peak = std::max(base_peak, std::abs(v));
  }
  const double bound = std::max({std::abs(s.chi_lo), std::abs(s.chi_hi), base_peak}) * gain_max;
  for (double v : pair.chi_true.data()) {
    if (std::abs(v) > bound * (1.0 + 1e-12)) return "chi_true exceeds range scaled by max gain";
  }
  if (resimulation_error(pair) > 1e-10) return "local field does not re-simulate from chi_true";
  return {};
}

}  // namespace qsm
