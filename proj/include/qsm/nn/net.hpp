#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "qsm/nn/ops.hpp"

namespace qsm::nn {

struct NetConfig {
  int base_channels = 8;
  int depth = 4;  // pooling levels; the topology is built for exactly 4
  double leaky_slope = 0.2;
  double norm_eps = 1e-5;
  int bottleneck_dilation = 2;
  std::array<std::size_t, 3> input_shape{32, 32, 32};  // (z, y, x)
  std::size_t attention_cap = 4096;

  static NetConfig toy();
  /// Full-width layout used for the census; only channel widths and input size change.
  static NetConfig paper_shape();

  void validate() const;
  /// Throws dim_mismatch unless every dim is a positive multiple of 2^depth.
  void require_divisible(std::size_t d, std::size_t h, std::size_t w) const;
  int channels(int level) const { return base_channels << level; }

  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
  bool operator==(const NetConfig&) const = default;
};

struct LayerCensus {
  int gated_dilation1 = 0;
  int gated_dilation2 = 0;
  int max_pools = 0;
  int deconvs = 0;
  int nonlocal_blocks = 0;
  int normalizations = 0;
  int concatenations = 0;
  int linear_convs = 0;

  bool operator==(const LayerCensus&) const = default;
  nlohmann::json to_json() const;
};

/// The reference layer counts of the gated encoder-decoder.
LayerCensus reference_census();

enum class LayerKind { gated_conv, max_pool, deconv, nonlocal, norm, concat, linear_conv };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  int dilation = 1;
};

/// Static layer list in execution order.
std::vector<LayerSpec> architecture(const NetConfig& cfg);
LayerCensus census_of(const std::vector<LayerSpec>& layers);

struct ParamEntry {
  std::string name;
  Tensor value;
  std::vector<double> accum;  // RMSprop running mean of squared gradients
};

class ParamStore {
 public:
  void add(const std::string& name, Shape5 shape, std::vector<double> values);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t parameter_count() const;
  void zero_grad();

  std::uint64_t step = 0;

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Fan-in scaled uniform weights, zero biases, unit norm gains; seeded.
ParamStore init_params(const NetConfig& cfg, std::uint64_t seed);

/// Same names and shapes, every value zero.
ParamStore zero_params(const NetConfig& cfg);

/// field and mask are (N, 1, d, h, w); returns (N, 1, d, h, w). When `executed`
/// is given, every layer run is counted into it.
Tensor forward_net(const NetConfig& cfg, const ParamStore& params, const Tensor& field,
                   const Tensor& mask, LayerCensus* executed = nullptr);

}  // namespace qsm::nn
