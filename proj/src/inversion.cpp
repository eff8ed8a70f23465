#include "qsm/inversion.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <numeric>

#include "qsm/fft.hpp"

namespace qsm {

nlohmann::json SolveLog::to_json() const {
  return {{"method", method},
          {"iterations", iterations},
          {"converged", converged},
          {"objective", objective},
          {"raw_objective", raw_objective},
          {"primal_residual", primal_residual},
          {"relative_update", relative_update},
          {"config", config}};
}

// ---------------------------------------------------------------- TKD

std::vector<double> tkd_inverse_kernel(const DipoleKernel& kernel, double threshold) {
  if (!(threshold > 0.0) || threshold > 2.0 / 3.0 + 1e-15) {
    fail(ErrorCode::invalid_argument, "TKD threshold must lie in (0, 2/3]");
  }
  std::vector<double> inv(kernel.size());
  for (std::size_t n = 0; n < inv.size(); ++n) {
    const double d = kernel[n];
    if (d == 0.0) {
      inv[n] = 0.0;
    } else if (std::abs(d) > threshold) {
      inv[n] = 1.0 / d;
    } else {
      inv[n] = (d > 0.0 ? 1.0 : -1.0) / threshold;
    }
  }
  return inv;
}

Volume invert_tkd(const Volume& field, const DipoleKernel& kernel, const TkdConfig& cfg,
                  const Mask& mask) {
  require_same_dims(field.dims(), kernel.grid.dims, "invert_tkd");
  require_same_dims(field.dims(), mask.dims(), "invert_tkd mask");
  const auto inv = tkd_inverse_kernel(kernel, cfg.threshold);
  Volume chi = apply_mask(apply_kspace_filter(field, inv), mask);
  chi.set_b0(kernel.b0);
  return chi;
}

// ----------------------------------------------------------------- ADMM

std::vector<double> forward_gradient(const Volume& v) {
  const Dims d = v.dims();
  const std::size_t n = v.size();
  std::vector<double> g(3 * n);
  std::size_t idx = 0;
  for (std::size_t k = 0; k < d.nz; ++k) {
    const std::size_t k1 = (k + 1 == d.nz) ? 0 : k + 1;
    for (std::size_t j = 0; j < d.ny; ++j) {
      const std::size_t j1 = (j + 1 == d.ny) ? 0 : j + 1;
      for (std::size_t i = 0; i < d.nx; ++i, ++idx) {
        const std::size_t i1 = (i + 1 == d.nx) ? 0 : i + 1;
        const double c = v[idx];
        g[idx] = v.at(i1, j, k) - c;
        g[n + idx] = v.at(i, j1, k) - c;
        g[2 * n + idx] = v.at(i, j, k1) - c;
      }
    }
  }
  return g;
}

namespace {

// k-space symbols of the circular forward differences along x, y, z.
std::array<CplxBuffer, 3> difference_symbols(const Dims& d) {
  std::array<CplxBuffer, 3> e;
  for (auto& b : e) b.resize(d.count());
  auto sym = [](std::size_t m, std::size_t len) {
    const double a = 2.0 * M_PI * static_cast<double>(m) / static_cast<double>(len);
    return cplx(std::cos(a) - 1.0, std::sin(a));
  };
  std::size_t n = 0;
  for (std::size_t k = 0; k < d.nz; ++k)
    for (std::size_t j = 0; j < d.ny; ++j)
      for (std::size_t i = 0; i < d.nx; ++i, ++n) {
        e[0][n] = sym(i, d.nx);
        e[1][n] = sym(j, d.ny);
        e[2][n] = sym(k, d.nz);
      }
  return e;
}

double weighted_tv(std::span<const double> grad, std::span<const double> gw, std::size_t n) {
  double s = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double g = gw.empty() ? 1.0 : gw[v];
    if (g == 0.0) continue;
    s += g * (std::abs(grad[v]) + std::abs(grad[n + v]) + std::abs(grad[2 * n + v]));
  }
  return s;
}

double norm2(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

}  // namespace

SolveResult admm_weighted_tv(const Volume& field, const DipoleKernel& kernel, const Volume& weights,
                             double alpha, std::span<const double> gradient_weight,
                             const TvAdmmConfig& cfg) {
  require_same_dims(field.dims(), kernel.grid.dims, "ADMM field");
  require_same_dims(field.dims(), weights.dims(), "ADMM weights");
  require_finite(field.data(), "ADMM field");
  const std::size_t n = field.size();
  if (!gradient_weight.empty() && gradient_weight.size() != n) {
    fail(ErrorCode::dim_mismatch, "gradient weight size mismatch");
  }
  if (!(alpha > 0.0) || !(cfg.mu1 > 0.0) || !(cfg.mu2 > 0.0)) {
    fail(ErrorCode::invalid_argument, "ADMM needs alpha, mu1, mu2 > 0");
  }
  if (cfg.max_iters < 1 || !(cfg.tol > 0.0)) {
    fail(ErrorCode::invalid_argument, "ADMM needs max_iters >= 1 and tol > 0");
  }
  for (double w : weights.data()) {
    if (!(w >= 0.0)) fail(ErrorCode::invalid_argument, "ADMM weights must be >= 0");
  }

  const Dims d = field.dims();
  const auto& D = kernel.values;
  const auto E = difference_symbols(d);

  std::vector<double> denom(n);
  for (std::size_t m = 0; m < n; ++m) {
    denom[m] = cfg.mu1 * (std::norm(E[0][m]) + std::norm(E[1][m]) + std::norm(E[2][m])) +
               cfg.mu2 * D[m] * D[m];
  }

  std::vector<double> w2f(n), w2(n);
  for (std::size_t v = 0; v < n; ++v) {
    w2[v] = weights[v] * weights[v];
    w2f[v] = w2[v] * field[v];
  }

  auto objective = [&](std::span<const double> dchi, std::span<const double> grad) {
    double data = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const double r = dchi[v] - field[v];
      data += w2[v] * r * r;
    }
    return 0.5 * data + alpha * weighted_tv(grad, gradient_weight, n);
  };

  Volume chi = Volume::zeros(field.grid(), Unit::ppm);
  chi.set_b0(kernel.b0);
  Volume best = chi;
  std::vector<double> z(3 * n, 0.0), s(3 * n, 0.0), z2(n, 0.0), s2(n, 0.0), dchi(n, 0.0);
  std::vector<double> thresh(n);
  for (std::size_t v = 0; v < n; ++v) {
    thresh[v] = (gradient_weight.empty() ? 1.0 : gradient_weight[v]) * alpha / cfg.mu1;
  }

  SolveResult out{chi, {}};
  SolveLog& log = out.log;
  const double f0 = objective(dchi, z);  // chi = 0
  double best_obj = f0;

  CplxBuffer rhs(n), tmp(n);
  std::vector<double> prev(n, 0.0);
  for (int it = 0; it < cfg.max_iters; ++it) {
    // chi-update: (mu1 sum|E|^2 + mu2 D^2) X = mu1 sum conj(E) F(z - s) + mu2 D F(z2 - s2)
    std::fill(rhs.begin(), rhs.end(), cplx(0.0, 0.0));
    for (int a = 0; a < 3; ++a) {
      for (std::size_t v = 0; v < n; ++v) tmp[v] = cplx(z[a * n + v] - s[a * n + v], 0.0);
      fft3_inplace(tmp, d, false);
      for (std::size_t m = 0; m < n; ++m) rhs[m] += cfg.mu1 * std::conj(E[a][m]) * tmp[m];
    }
    for (std::size_t v = 0; v < n; ++v) tmp[v] = cplx(z2[v] - s2[v], 0.0);
    fft3_inplace(tmp, d, false);
    for (std::size_t m = 0; m < n; ++m) {
      rhs[m] += cfg.mu2 * D[m] * tmp[m];
      rhs[m] = denom[m] > 0.0 ? rhs[m] / denom[m] : cplx(0.0, 0.0);
      tmp[m] = rhs[m] * D[m];
    }
    fft3_inplace(rhs, d, true);
    fft3_inplace(tmp, d, true);
    for (std::size_t v = 0; v < n; ++v) {
      prev[v] = chi[v];
      chi[v] = rhs[v].real();
      dchi[v] = tmp[v].real();
    }

    // z-update: soft threshold of grad chi + s
    const std::vector<double> grad = forward_gradient(chi);
    for (std::size_t q = 0; q < 3 * n; ++q) {
      const double u = grad[q] + s[q];
      const double t = thresh[q % n];
      z[q] = u > t ? u - t : (u < -t ? u + t : 0.0);
    }
    // z2-update: pointwise weighted data proximal step
    for (std::size_t v = 0; v < n; ++v) {
      z2[v] = (w2f[v] + cfg.mu2 * (dchi[v] + s2[v])) / (w2[v] + cfg.mu2);
    }
    double pr = 0.0;
    for (std::size_t q = 0; q < 3 * n; ++q) {
      const double r = grad[q] - z[q];
      s[q] += r;
      pr += r * r;
    }
    for (std::size_t v = 0; v < n; ++v) s2[v] += dchi[v] - z2[v];

    const double obj = objective(dchi, grad);
    if (!std::isfinite(obj) || (f0 > 0.0 && obj > 10.0 * f0)) {
      throw ConvergenceError(ErrorCode::diverged,
                             "ADMM diverged: objective " + std::to_string(obj) +
                                 " exceeds 10x its starting value " + std::to_string(f0),
                             obj);
    }
    if (obj <= best_obj) {
      best_obj = obj;
      best = chi;
    }

    double du = 0.0;
    for (std::size_t v = 0; v < n; ++v) du += (chi[v] - prev[v]) * (chi[v] - prev[v]);
    const double cn = norm2(chi.data());
    const double rel_update = std::sqrt(du) / std::max(cn, 1e-300);
    const double rel_primal = std::sqrt(pr) / std::max(norm2(grad), 1e-300);

    log.raw_objective.push_back(obj);
    log.objective.push_back(best_obj);
    log.primal_residual.push_back(cn == 0.0 ? 0.0 : rel_primal);
    log.relative_update.push_back(cn == 0.0 ? 0.0 : rel_update);
    log.iterations = it + 1;
    // chi = 0 is a fixed point only when the data split is also zero; the
    // first step from the all-zero state always lands here.
    const bool zero_fixed_point = cn == 0.0 && norm2(z2) == 0.0;
    if (zero_fixed_point || (cn > 0.0 && rel_update < cfg.tol && rel_primal < cfg.tol)) {
      log.converged = true;
      break;
    }
  }
  out.chi = std::move(best);
  log.config = {{"alpha", alpha}, {"mu1", cfg.mu1}, {"mu2", cfg.mu2},
                {"max_iters", cfg.max_iters}, {"tol", cfg.tol}};
  return out;
}

SolveResult invert_tv_admm(const Volume& field, const DipoleKernel& kernel, const Volume& weights,
                           const TvAdmmConfig& cfg) {
  SolveResult r = admm_weighted_tv(field, kernel, weights, cfg.alpha1, {}, cfg);
  r.log.method = "tv";
  r.log.config["alpha1"] = cfg.alpha1;
  return r;
}

std::vector<double> morphology_gradient_mask(const Volume& reference, const Volume& weights,
                                             double edge_percentile) {
  require_same_dims(reference.dims(), weights.dims(), "morphology mask");
  if (!(edge_percentile > 0.0 && edge_percentile < 100.0)) {
    fail(ErrorCode::invalid_argument, "edge_percentile must lie in (0, 100)");
  }
  const std::size_t n = reference.size();
  const auto g = forward_gradient(reference);
  std::vector<double> mag(n);
  for (std::size_t v = 0; v < n; ++v) {
    mag[v] = std::sqrt(g[v] * g[v] + g[n + v] * g[n + v] + g[2 * n + v] * g[2 * n + v]);
  }
  std::vector<double> inside;
  for (std::size_t v = 0; v < n; ++v) {
    if (weights[v] > 0.0) inside.push_back(mag[v]);
  }
  std::vector<double> mask(n, 1.0);
  if (inside.empty()) return mask;
  // Voxels strictly above the (100 - p)th percentile are edges.
  const auto keep = static_cast<std::size_t>(
      std::floor(static_cast<double>(inside.size()) * (1.0 - edge_percentile / 100.0)));
  std::nth_element(inside.begin(), inside.begin() + static_cast<long>(std::min(keep, inside.size() - 1)),
                   inside.end());
  const double cut = inside[std::min(keep, inside.size() - 1)];
  for (std::size_t v = 0; v < n; ++v) {
    if (weights[v] > 0.0 && mag[v] > cut) mask[v] = 0.0;
  }
  return mask;
}

SolveResult invert_medi_like_with_mask(const Volume& field, const DipoleKernel& kernel,
                                       std::span<const double> gradient_mask,
                                       const Volume& weights, const MediConfig& cfg) {
  if (!(cfg.lambda > 0.0)) fail(ErrorCode::invalid_argument, "MEDI lambda must be > 0");
  SolveResult r = admm_weighted_tv(field, kernel, weights, 1.0 / cfg.lambda, gradient_mask, cfg.admm);
  // Report the objective in the lambda-weighted form lambda/2 ||.||^2 + ||M grad||_1.
  for (double& o : r.log.objective) o *= cfg.lambda;
  for (double& o : r.log.raw_objective) o *= cfg.lambda;
  r.log.method = "medi";
  r.log.config["lambda"] = cfg.lambda;
  r.log.config["edge_percentile"] = cfg.edge_percentile;
  return r;
}

SolveResult invert_medi_like(const Volume& field, const DipoleKernel& kernel,
                             const Volume& reference_edges, const Volume& weights,
                             const MediConfig& cfg) {
  require_same_dims(field.dims(), reference_edges.dims(), "MEDI reference");
  const auto gm = morphology_gradient_mask(reference_edges, weights, cfg.edge_percentile);
  return invert_medi_like_with_mask(field, kernel, gm, weights, cfg);
}

// --------------------------------------------------------------- COSMOS

void OrientationSet::require_well_posed() const {
  if (entries.size() < 3) {
    fail(ErrorCode::ill_conditioned, "COSMOS needs at least 3 orientations, got " +
                                         std::to_string(entries.size()));
  }
}

CosmosResult invert_cosmos(const OrientationSet& orients, const CosmosConfig& cfg) {
  if (orients.entries.empty()) fail(ErrorCode::invalid_argument, "COSMOS needs orientations");
  if (!(cfg.eps >= 0.0)) fail(ErrorCode::invalid_argument, "COSMOS eps must be >= 0");
  const Grid grid = orients.entries.front().local_field.grid();
  const std::size_t n = grid.count();

  Mask common = Mask::full(grid);
  CplxBuffer num(n, cplx(0.0, 0.0));
  std::vector<double> den(n, 0.0), den_unique(n, 0.0);
  std::vector<B0Direction> seen;
  for (const Orientation& o : orients.entries) {
    require_same_dims(o.local_field.dims(), grid.dims, "COSMOS field");
    require_same_dims(o.mask.dims(), grid.dims, "COSMOS mask");
    for (std::size_t v = 0; v < n; ++v) {
      if (!o.mask[v]) common.set(v, false);
    }
    const DipoleKernel k = build_dipole_kernel(grid, o.b0);
    ComplexVolume F = fft3_forward(apply_mask(o.local_field, o.mask));
    for (std::size_t m = 0; m < n; ++m) {
      num[m] += k[m] * F[m];
      den[m] += k[m] * k[m];
    }
    const bool duplicate = std::any_of(seen.begin(), seen.end(), [&](const B0Direction& b) {
      return std::abs(b.x() - o.b0.x()) < 1e-9 && std::abs(b.y() - o.b0.y()) < 1e-9 &&
             std::abs(b.z() - o.b0.z()) < 1e-9;
    });
    if (!duplicate) {
      seen.push_back(o.b0);
      for (std::size_t m = 0; m < n; ++m) den_unique[m] += k[m] * k[m];
    }
  }

  ConditioningReport report;
  report.unique_orientations = seen.size();
  report.min_sum_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < n; ++m) {
    if (den_unique[m] < 1e-6) report.ill_conditioned_bins.push_back(m);
    if (m != 0) report.min_sum_d2 = std::min(report.min_sum_d2, den_unique[m]);
  }
  if (n == 1) report.min_sum_d2 = 0.0;

  ComplexVolume X(grid);
  for (std::size_t m = 0; m < n; ++m) {
    const double dd = den[m] + cfg.eps;
    X[m] = dd > 0.0 ? num[m] / dd : cplx(0.0, 0.0);
  }
  fft3_inplace(X.data, grid.dims, true);
  Volume chi = apply_mask(X.real(Unit::ppm), common);
  return {std::move(chi), std::move(report)};
}

}  // namespace qsm
