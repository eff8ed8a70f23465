#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "qsm/nn/tensor.hpp"

namespace qsm::testing {

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline nn::Tensor random_param(nn::Shape5 s, std::uint64_t seed, double scale = 1.0) {
  auto v = random_values(s.count(), seed, -scale, scale);
  return nn::Tensor::parameter(s, std::move(v));
}

struct GradCheck {
  double worst_relative = 0.0;  // max over inputs of ||analytic - numeric|| / max(norms)
  std::size_t entries_checked = 0;
  std::vector<std::size_t> below_noise;  // inputs whose gradients both lie under the roundoff floor
  double loss = 0.0;
  std::size_t worst_input = 0;       // index into `inputs`
  double worst_analytic_norm = 0.0;  // of the probed entries of that input
};

/// Central finite differences of the scalar `loss()` with respect to entries
/// of each input, compared against one reverse-mode sweep. At most
/// `max_per_input` entries per input are probed, chosen by a seeded draw.
///
/// With several steps (largest first), each entry uses the smaller step of the
/// adjacent pair whose two differences agree best. Large steps cross
/// piecewise-linear kinks, small steps drown in roundoff; the plateau between
/// them is found without looking at the analytic value.
///
/// The roundoff of a central difference is about eps * |loss| / h; 1e4 times
/// that is the noise floor. An input whose analytic and numeric gradients
/// both lie under it (a structural zero such as the key bias of softmax
/// attention) has nothing measurable to compare and is counted separately.
inline GradCheck grad_check_steps(const std::function<nn::Tensor()>& loss, std::vector<nn::Tensor> inputs,
                                  const std::vector<double>& steps, std::size_t max_per_input = 0,
                                  std::uint64_t seed = 1) {
  for (auto& t : inputs) t.zero_grad();
  const nn::Tensor l0 = loss();
  const double noise = 1e4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(l0.item()));
  nn::backward(l0);
  GradCheck out;
  out.loss = l0.item();
  std::mt19937_64 rng(seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_input && idx.size() > max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_input);
    }
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0, floor2 = 0.0;
    for (std::size_t i : idx) {
      double& v = t.mutable_value()[i];
      const double orig = v;
      std::vector<double> fd;
      for (double h : steps) {
        v = orig + h;
        const double fp = loss().item();
        v = orig - h;
        const double fm = loss().item();
        fd.push_back((fp - fm) / (2.0 * h));
      }
      v = orig;
      std::size_t pick = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k + 1 < fd.size(); ++k) {
        if (std::abs(fd[k] - fd[k + 1]) < best) {
          best = std::abs(fd[k] - fd[k + 1]);
          pick = k + 1;
        }
      }
      const double num = fd[pick];
      const double floor = noise / steps[pick];
      diff2 += (num - analytic[i]) * (num - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
      floor2 += floor * floor;
      ++out.entries_checked;
    }
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    if (scale <= std::sqrt(floor2)) {
      out.below_noise.push_back(ti);
      continue;
    }
    if (std::sqrt(diff2) / scale > out.worst_relative) {
      out.worst_relative = std::sqrt(diff2) / scale;
      out.worst_input = ti;
      out.worst_analytic_norm = std::sqrt(a2);
    }
  }
  return out;
}

inline GradCheck grad_check(const std::function<nn::Tensor()>& loss, std::vector<nn::Tensor> inputs,
                            double h = 1e-5, std::size_t max_per_input = 0, std::uint64_t seed = 1) {
  return grad_check_steps(loss, std::move(inputs), {h}, max_per_input, seed);
}

}  // namespace qsm::testing
