#include "qsm/field_prep.hpp"

#include <cmath>

#include "qsm/fft.hpp"
#include "qsm/morphology.hpp"

namespace qsm {

std::vector<double> EchoSeries::uniform_tes(std::size_t n, double first_ms, double spacing_ms) {
  std::vector<double> tes(n);
  for (std::size_t i = 0; i < n; ++i) tes[i] = first_ms + spacing_ms * static_cast<double>(i);
  return tes;
}

FieldFit fit_field(const EchoSeries& series, const Mask& mask) {
  const auto& e = series.echoes;
  if (e.size() < 2) fail(ErrorCode::invalid_argument, "fit_field needs at least 2 echoes");
  for (std::size_t i = 0; i < e.size(); ++i) {
    require_same_dims(e[i].phase.dims(), mask.dims(), "fit_field phase");
    if (e[i].magnitude) require_same_dims(e[i].magnitude->dims(), mask.dims(), "fit_field magnitude");
    if (i > 0 && !(e[i].te_ms > e[i - 1].te_ms)) {
      fail(ErrorCode::invalid_argument, "echo times must be strictly increasing");
    }
  }
  const bool weighted = e.front().magnitude.has_value();
  for (const Echo& echo : e) {
    if (echo.magnitude.has_value() != weighted) {
      fail(ErrorCode::invalid_argument, "magnitudes must be given for all echoes or none");
    }
  }

  FieldFit fit{Volume::zeros(mask.grid(), Unit::hz), Mask::empty(mask.grid()), 0};
  const double rad_per_ms_to_hz = 1000.0 / (2.0 * M_PI);
  for (std::size_t n = 0; n < mask.size(); ++n) {
    if (!mask[n]) continue;
    double sw = 0.0, swt = 0.0, swp = 0.0;
    for (const Echo& echo : e) {
      const double w = weighted ? (*echo.magnitude)[n] * (*echo.magnitude)[n] : 1.0;
      sw += w;
      swt += w * echo.te_ms;
      swp += w * echo.phase[n];
    }
    if (sw == 0.0) {
      fit.degenerate.set(n, true);
      ++fit.n_degenerate;
      continue;
    }
    const double tbar = swt / sw, pbar = swp / sw;
    double sxx = 0.0, sxy = 0.0;
    for (const Echo& echo : e) {
      const double w = weighted ? (*echo.magnitude)[n] * (*echo.magnitude)[n] : 1.0;
      const double dt = echo.te_ms - tbar;
      sxx += w * dt * dt;
      sxy += w * dt * (echo.phase[n] - pbar);
    }
    if (sxx == 0.0) {
      fit.degenerate.set(n, true);
      ++fit.n_degenerate;
      continue;
    }
    fit.field_hz[n] = sxy / sxx * rad_per_ms_to_hz;
  }
  return fit;
}

Volume hz_to_ppm(const Volume& field_hz, double b0_tesla) {
  if (field_hz.unit() != Unit::hz) fail(ErrorCode::unit_mismatch, "hz_to_ppm expects a Hz volume");
  if (!(b0_tesla > 0.0)) fail(ErrorCode::invalid_argument, "B0 field strength must be > 0");
  return field_hz.relabeled(Unit::ppm) * (1e6 / (kGyromagneticHzPerTesla * b0_tesla));
}

std::vector<double> smv_kernel_kspace(const Grid& grid, double radius_mm) {
  const auto offsets = ball_offsets(grid.voxel_mm, radius_mm);
  const Dims d = grid.dims;
  ComplexVolume k(grid);
  const double w = 1.0 / static_cast<double>(offsets.size());
  auto wrap = [](long v, std::size_t n) {
    const long m = static_cast<long>(n);
    return static_cast<std::size_t>(((v % m) + m) % m);
  };
  for (const auto& o : offsets) {
    k[grid.index(wrap(o[0], d.nx), wrap(o[1], d.ny), wrap(o[2], d.nz))] += w;
  }
  fft3_inplace(k.data, d, false);
  std::vector<double> out(k.size());
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = k[n].real();
  return out;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
  return s;
}

}  // namespace

ResharpResult resharp(const Volume& total_field, const Mask& mask, const ResharpConfig& cfg) {
  require_same_dims(total_field.dims(), mask.dims(), "resharp");
  mask.require_nonempty("resharp");
  require_finite(total_field.data(), "resharp");
  const VoxelSize vs = total_field.voxel_mm();
  const Dims d = total_field.dims();
  if (!(cfg.radius_mm >= std::max({vs.dx, vs.dy, vs.dz}))) {
    fail(ErrorCode::invalid_argument, "RESHARP radius must cover at least one voxel on every axis");
  }
  if (2.0 * cfg.radius_mm >= std::min({d.nx * vs.dx, d.ny * vs.dy, d.nz * vs.dz})) {
    fail(ErrorCode::invalid_argument, "RESHARP radius does not fit within the field of view");
  }
  if (!(cfg.tikhonov_lambda > 0.0) || cfg.cg_max_iters < 1 || !(cfg.cg_tol > 0.0)) {
    fail(ErrorCode::invalid_argument, "RESHARP needs lambda > 0, cg_max_iters >= 1, cg_tol > 0");
  }

  const Mask reliable = erode_mask(mask, cfg.radius_mm);
  std::vector<double> high_pass = smv_kernel_kspace(total_field.grid(), cfg.radius_mm);
  for (double& v : high_pass) v = 1.0 - v;

  auto restrict_to = [&](Volume v) { return apply_mask(v, reliable); };
  // A x = (I - S) M (I - S) x + lambda x, with (I - S) symmetric.
  auto normal_op = [&](const Volume& x) {
    Volume y = apply_kspace_filter(restrict_to(apply_kspace_filter(x, high_pass)), high_pass);
    for (std::size_t n = 0; n < y.size(); ++n) y[n] += cfg.tikhonov_lambda * x[n];
    return y;
  };

  const Volume b = apply_kspace_filter(restrict_to(apply_kspace_filter(total_field, high_pass)), high_pass);
  const double bnorm = std::sqrt(dot(b.data(), b.data()));

  ResharpResult result{Volume::zeros(total_field.grid(), total_field.unit()), reliable, 0, 0.0};
  result.local_field.set_b0(total_field.b0());
  if (bnorm == 0.0) return result;

  Volume x = Volume::zeros(total_field.grid(), total_field.unit());
  Volume r = b;
  Volume p = r;
  double rr = dot(r.data(), r.data());
  int it = 0;
  double rel = std::sqrt(rr) / bnorm;
  while (rel > cfg.cg_tol && it < cfg.cg_max_iters) {
    const Volume ap = normal_op(p);
    const double alpha = rr / dot(p.data(), ap.data());
    for (std::size_t n = 0; n < x.size(); ++n) {
      x[n] += alpha * p[n];
      r[n] -= alpha * ap[n];
    }
    const double rr_new = dot(r.data(), r.data());
    for (std::size_t n = 0; n < p.size(); ++n) p[n] = r[n] + (rr_new / rr) * p[n];
    rr = rr_new;
    rel = std::sqrt(rr) / bnorm;
    ++it;
  }
  if (rel > cfg.cg_tol) {
    throw ConvergenceError(ErrorCode::not_converged,
                           "RESHARP CG did not converge in " + std::to_string(cfg.cg_max_iters) +
                               " iterations (relative residual " + std::to_string(rel) + ")",
                           rel);
  }
  result.local_field = apply_mask(x, reliable);
  result.local_field.set_b0(total_field.b0());
  result.iterations = it;
  result.relative_residual = rel;
  return result;
}

}  // namespace qsm
