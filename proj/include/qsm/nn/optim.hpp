#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "qsm/nn/net.hpp"

namespace qsm::nn {

struct RmspropConfig {
  double lr0 = 1e-4;
  double rho = 0.9;
  double eps = 1e-8;
  double gamma = 0.95;
  std::uint64_t decay_every = 200;

  void validate() const;
  nlohmann::json to_json() const;
  static RmspropConfig from_json(const nlohmann::json& j);
  bool operator==(const RmspropConfig&) const = default;
};

/// lr0 * gamma^floor(step / decay_every).
double learning_rate(const RmspropConfig& cfg, std::uint64_t step);

/// One update with explicit gradients (one vector per parameter, store order).
/// Any non-finite gradient rejects the whole step: nothing changes and a
/// non_finite error names the offending parameter.
void rmsprop_step(ParamStore& params, const std::vector<std::vector<double>>& grads, const RmspropConfig& cfg);

/// Same, taking the gradients accumulated on the parameter tensors.
void rmsprop_step(ParamStore& params, const RmspropConfig& cfg);

}  // namespace qsm::nn
