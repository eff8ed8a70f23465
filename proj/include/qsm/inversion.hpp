#pragma once

#include <vector>

#include <json.hpp>

#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

namespace qsm {

// ---------------------------------------------------------------- TKD

struct TkdConfig {
  double threshold = 0.20;
};

/// Thresholded inverse kernel: 1/D where |D| > t, sign(D)/t where 0 < |D| <= t, 0 at D = 0.
std::vector<double> tkd_inverse_kernel(const DipoleKernel& kernel, double threshold);

Volume invert_tkd(const Volume& field, const DipoleKernel& kernel, const TkdConfig& cfg,
                  const Mask& mask);

// ---------------------------------------------------------- ADMM (TV / MEDI)

struct TvAdmmConfig {
  double alpha1 = 2e-4;  // TV weight
  double mu1 = 1e-2;     // gradient-split penalty
  double mu2 = 1.0;      // data-split penalty
  int max_iters = 300;
  double tol = 1e-3;     // relative update and relative primal residual
};

struct SolveLog {
  std::string method;
  int iterations = 0;
  bool converged = false;
  /// Objective of the returned iterate after each step (non-increasing).
  std::vector<double> objective;
  /// Objective of the raw ADMM iterate after each step.
  std::vector<double> raw_objective;
  /// ||grad chi - z|| / max(||grad chi||, tiny) after each step.
  std::vector<double> primal_residual;
  std::vector<double> relative_update;
  nlohmann::json config;

  nlohmann::json to_json() const;
};

struct SolveResult {
  Volume chi;
  SolveLog log;
};

/// Minimizes 1/2 ||w (D*chi - f)||^2 + alpha * sum_v g_v |grad chi|_1 with
/// forward-difference circular gradients, where g is an optional per-voxel
/// gradient weight (empty = all ones). The returned iterate is the best
/// objective seen so far, so the reported trace never increases.
SolveResult admm_weighted_tv(const Volume& field, const DipoleKernel& kernel, const Volume& weights,
                             double alpha, std::span<const double> gradient_weight,
                             const TvAdmmConfig& cfg);

SolveResult invert_tv_admm(const Volume& field, const DipoleKernel& kernel, const Volume& weights,
                           const TvAdmmConfig& cfg = {});

struct MediConfig {
  double lambda = 1000.0;        // fidelity weight
  double edge_percentile = 30.0; // top percent of |grad reference| treated as edges
  TvAdmmConfig admm{};           // alpha1 ignored; alpha = 1 / lambda
};

/// Binary gradient-penalty mask: 0 at the top `edge_percentile` percent of
/// |grad reference| among voxels with weight > 0, 1 elsewhere.
std::vector<double> morphology_gradient_mask(const Volume& reference, const Volume& weights,
                                             double edge_percentile);

SolveResult invert_medi_like(const Volume& field, const DipoleKernel& kernel,
                             const Volume& reference_edges, const Volume& weights,
                             const MediConfig& cfg = {});

/// Same solver with a caller-supplied gradient mask (1 = penalize, 0 = edge).
SolveResult invert_medi_like_with_mask(const Volume& field, const DipoleKernel& kernel,
                                       std::span<const double> gradient_mask,
                                       const Volume& weights, const MediConfig& cfg = {});

/// Circular forward differences: returns (gx, gy, gz) concatenated.
std::vector<double> forward_gradient(const Volume& v);

// -------------------------------------------------------------- COSMOS

struct Orientation {
  Volume local_field;
  B0Direction b0;
  Mask mask;
};

struct OrientationSet {
  std::vector<Orientation> entries;

  /// At least three orientations are needed for a well-posed inversion.
  void require_well_posed() const;
};

struct CosmosConfig {
  double eps = 1e-6;
};

struct ConditioningReport {
  std::size_t unique_orientations = 0;
  /// Bins (DC included) where the summed squared kernels of the unique orientations are < 1e-6.
  std::vector<std::size_t> ill_conditioned_bins;
  /// Smallest summed squared kernel over non-DC bins.
  double min_sum_d2 = 0.0;
  bool ill_conditioned() const { return min_sum_d2 < 1e-6; }
};

struct CosmosResult {
  Volume chi;
  ConditioningReport conditioning;
};

CosmosResult invert_cosmos(const OrientationSet& orients, const CosmosConfig& cfg = {});

}  // namespace qsm
