#include "qsm/nn/optim.hpp"

#include <cmath>

#include "qsm/error.hpp"

namespace qsm::nn {

void RmspropConfig::validate() const {
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) fail(ErrorCode::invalid_argument, "lr0 must be positive");
  if (!(rho >= 0.0 && rho < 1.0)) fail(ErrorCode::invalid_argument, "rho must be in [0, 1)");
  if (!(eps > 0.0)) fail(ErrorCode::invalid_argument, "eps must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail(ErrorCode::invalid_argument, "gamma must be in (0, 1]");
  if (decay_every == 0) fail(ErrorCode::invalid_argument, "decay_every must be >= 1");
}

nlohmann::json RmspropConfig::to_json() const {
  return {{"lr0", lr0}, {"rho", rho}, {"eps", eps}, {"gamma", gamma}, {"decay_every", decay_every}};
}

RmspropConfig RmspropConfig::from_json(const nlohmann::json& j) {
  RmspropConfig c;
  try {
    c.lr0 = j.value("lr0", c.lr0);
    c.rho = j.value("rho", c.rho);
    c.eps = j.value("eps", c.eps);
    c.gamma = j.value("gamma", c.gamma);
    c.decay_every = j.value("decay_every", c.decay_every);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("optimizer config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate(const RmspropConfig& cfg, std::uint64_t step) {
  return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(step / cfg.decay_every));
}

void rmsprop_step(ParamStore& params, const std::vector<std::vector<double>>& grads, const RmspropConfig& cfg) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) fail(ErrorCode::dim_mismatch, "rmsprop: gradient count mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].size() != entries[i].value.size()) {
      fail(ErrorCode::dim_mismatch, "rmsprop: gradient shape mismatch for " + entries[i].name);
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) {
        fail(ErrorCode::non_finite, "rmsprop: non-finite gradient in " + entries[i].name +
                                        " at step " + std::to_string(params.step) + "; step rejected");
      }
    }
  }
  const double lr = learning_rate(cfg, params.step);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto p = entries[i].value.mutable_value();
    auto& a = entries[i].accum;
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      a[k] = cfg.rho * a[k] + (1.0 - cfg.rho) * g[k] * g[k];
      p[k] -= lr * g[k] / std::sqrt(a[k] + cfg.eps);
    }
  }
  ++params.step;
}

void rmsprop_step(ParamStore& params, const RmspropConfig& cfg) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.entries().size());
  for (const auto& e : params.entries()) {
    const auto g = e.value.grad();
    grads.emplace_back(g.begin(), g.end());
  }
  rmsprop_step(params, grads, cfg);
}

}  // namespace qsm::nn
