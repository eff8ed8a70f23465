#include "qsm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qsm/fft.hpp"

namespace qsm {
namespace {

void check_inputs(const Volume& pred, const Volume& ref, const Mask& mask, const char* what) {
  require_same_dims(pred.dims(), ref.dims(), what);
  require_same_dims(pred.dims(), mask.dims(), what);
  mask.require_nonempty(what);
}

double masked_rmse_percent(std::span<const double> pred, std::span<const double> ref,
                           const Mask& mask, const char* what) {
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < ref.size(); ++n) {
    if (!mask[n]) continue;
    const double e = pred[n] - ref[n];
    num += e * e;
    den += ref[n] * ref[n];
  }
  if (den == 0.0) fail(ErrorCode::invalid_argument, std::string(what) + ": reference has zero norm in mask");
  return 100.0 * std::sqrt(num / den);
}

std::vector<double> cube_kernel(int size, const auto& value) {
  if (size < 1 || size % 2 == 0) fail(ErrorCode::invalid_argument, "kernel size must be odd and >= 1");
  const int c = size / 2;
  std::vector<double> k(static_cast<std::size_t>(size) * size * size);
  std::size_t n = 0;
  for (int z = -c; z <= c; ++z)
    for (int y = -c; y <= c; ++y)
      for (int x = -c; x <= c; ++x) k[n++] = value(x, y, z);
  return k;
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  return {{"rmse_percent", rmse_percent},
          {"hfen_percent", hfen_percent},
          {"ssim", ssim},
          {"mask_voxels", mask_voxels},
          {"config",
           {{"hfen_log_kernel", config.log_kernel_size},
            {"hfen_log_sigma", config.log_sigma},
            {"ssim_window", config.ssim_window_size},
            {"ssim_sigma", config.ssim_sigma},
            {"ssim_k1", config.ssim_k1},
            {"ssim_k2", config.ssim_k2},
            {"ssim_symmetric_range", config.ssim_symmetric_range}}}};
}

std::vector<double> gaussian_window(int size, double sigma) {
  auto k = cube_kernel(size, [sigma](int x, int y, int z) {
    return std::exp(-(x * x + y * y + z * z) / (2.0 * sigma * sigma));
  });
  double s = 0.0;
  for (double v : k) s += v;
  for (double& v : k) v /= s;
  return k;
}

std::vector<double> log_kernel(int size, double sigma) {
  const double s2 = sigma * sigma;
  auto g = gaussian_window(size, sigma);
  const int c = size / 2;
  std::size_t n = 0;
  double sum = 0.0;
  for (int z = -c; z <= c; ++z)
    for (int y = -c; y <= c; ++y)
      for (int x = -c; x <= c; ++x, ++n) {
        g[n] *= (x * x + y * y + z * z - 3.0 * s2) / (s2 * s2);
        sum += g[n];
      }
  const double mean = sum / static_cast<double>(g.size());
  for (double& v : g) v -= mean;
  return g;
}

Volume circular_filter(const Volume& v, const std::vector<double>& kernel, int size) {
  const Dims d = v.dims();
  const int c = size / 2;
  ComplexVolume k(v.grid());
  auto wrap = [](int o, std::size_t len) {
    const long m = static_cast<long>(len);
    return static_cast<std::size_t>(((o % m) + m) % m);
  };
  std::size_t n = 0;
  for (int z = -c; z <= c; ++z)
    for (int y = -c; y <= c; ++y)
      for (int x = -c; x <= c; ++x, ++n) {
        k[v.grid().index(wrap(x, d.nx), wrap(y, d.ny), wrap(z, d.nz))] += kernel[n];
      }
  fft3_inplace(k.data, d, false);
  ComplexVolume f = ComplexVolume::from_real(v);
  fft3_inplace(f.data, d, false);
  for (std::size_t m = 0; m < f.size(); ++m) f[m] *= k[m];
  fft3_inplace(f.data, d, true);
  return f.real(v.unit());
}

double rmse_percent(const Volume& pred, const Volume& ref, const Mask& mask) {
  check_inputs(pred, ref, mask, "rmse");
  return masked_rmse_percent(pred.data(), ref.data(), mask, "rmse");
}

double hfen_percent(const Volume& pred, const Volume& ref, const Mask& mask, const MetricsConfig& cfg) {
  check_inputs(pred, ref, mask, "hfen");
  const auto k = log_kernel(cfg.log_kernel_size, cfg.log_sigma);
  const Volume lp = circular_filter(pred, k, cfg.log_kernel_size);
  const Volume lr = circular_filter(ref, k, cfg.log_kernel_size);
  return masked_rmse_percent(lp.data(), lr.data(), mask, "hfen");
}

double ssim(const Volume& pred, const Volume& ref, const Mask& mask, const MetricsConfig& cfg) {
  check_inputs(pred, ref, mask, "ssim");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t n = 0; n < ref.size(); ++n) {
    if (!mask[n]) continue;
    lo = std::min(lo, ref[n]);
    hi = std::max(hi, ref[n]);
    if (cfg.ssim_symmetric_range) {
      lo = std::min(lo, pred[n]);
      hi = std::max(hi, pred[n]);
    }
  }
  const double L = hi - lo;
  if (!(L > 0.0)) fail(ErrorCode::invalid_argument, "ssim: degenerate dynamic range L = 0");
  const double c1 = (cfg.ssim_k1 * L) * (cfg.ssim_k1 * L), c2 = (cfg.ssim_k2 * L) * (cfg.ssim_k2 * L);

  const Volume x = apply_mask(pred, mask).relabeled(Unit::dimensionless);
  const Volume y = apply_mask(ref, mask).relabeled(Unit::dimensionless);
  Volume xx = x, yy = y, xy = x;
  for (std::size_t n = 0; n < x.size(); ++n) {
    xx[n] = x[n] * x[n];
    yy[n] = y[n] * y[n];
    xy[n] = x[n] * y[n];
  }
  const auto w = gaussian_window(cfg.ssim_window_size, cfg.ssim_sigma);
  const int sz = cfg.ssim_window_size;
  const Volume mx = circular_filter(x, w, sz), my = circular_filter(y, w, sz);
  const Volume sxx = circular_filter(xx, w, sz), syy = circular_filter(yy, w, sz),
               sxy = circular_filter(xy, w, sz);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    if (!mask[n]) continue;
    const double vx = sxx[n] - mx[n] * mx[n], vy = syy[n] - my[n] * my[n],
                 cxy = sxy[n] - mx[n] * my[n];
    acc += ((2.0 * mx[n] * my[n] + c1) * (2.0 * cxy + c2)) /
           ((mx[n] * mx[n] + my[n] * my[n] + c1) * (vx + vy + c2));
    ++count;
  }
  return acc / static_cast<double>(count);
}

MetricsReport evaluate(const Volume& pred, const Volume& ref, const Mask& mask, const MetricsConfig& cfg) {
  MetricsReport r;
  r.rmse_percent = rmse_percent(pred, ref, mask);
  r.hfen_percent = hfen_percent(pred, ref, mask, cfg);
  r.ssim = ssim(pred, ref, mask, cfg);
  r.mask_voxels = mask.count();
  r.config = cfg;
  return r;
}

}  // namespace qsm
