#pragma once

#include <vector>

#include <json.hpp>

#include "qsm/volume.hpp"

namespace qsm {

struct MetricsConfig {
  int log_kernel_size = 15;
  double log_sigma = 1.5;
  int ssim_window_size = 11;
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  /// Dynamic range from both volumes instead of the reference only.
  bool ssim_symmetric_range = false;
};

struct MetricsReport {
  double rmse_percent = 0.0;
  double hfen_percent = 0.0;
  double ssim = 0.0;
  std::size_t mask_voxels = 0;
  MetricsConfig config;

  nlohmann::json to_json() const;
};

/// 100 * ||m (pred - ref)|| / ||m ref||.
double rmse_percent(const Volume& pred, const Volume& ref, const Mask& mask);

/// RMSE percent of LoG-filtered volumes. The LoG filter is applied to the
/// full volumes with circular convolution, then the mask is applied.
double hfen_percent(const Volume& pred, const Volume& ref, const Mask& mask,
                    const MetricsConfig& cfg = {});

/// Mean local SSIM over masked voxels. Both volumes are masked first, so the
/// value does not depend on anything outside the mask.
double ssim(const Volume& pred, const Volume& ref, const Mask& mask, const MetricsConfig& cfg = {});

MetricsReport evaluate(const Volume& pred, const Volume& ref, const Mask& mask,
                       const MetricsConfig& cfg = {});

/// Zero-sum Laplacian-of-Gaussian kernel, size^3 taps, x-fastest, centered.
std::vector<double> log_kernel(int size, double sigma);
/// Normalized Gaussian window, size^3 taps, x-fastest, centered.
std::vector<double> gaussian_window(int size, double sigma);

/// Circular convolution of v with a centered odd-sized cubic kernel, via FFT.
Volume circular_filter(const Volume& v, const std::vector<double>& kernel, int size);

}  // namespace qsm
