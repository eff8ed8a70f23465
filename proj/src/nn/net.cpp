#include "qsm/nn/net.hpp"

#include <cmath>
#include <random>

#include "qsm/error.hpp"
#include "qsm/phantom.hpp"

namespace qsm::nn {
namespace {

constexpr int kDepth = 4;
constexpr int kBottleneckConvs = 3;

Shape5 conv_w(int cout, int cin, int k) {
  return {static_cast<std::size_t>(cout), static_cast<std::size_t>(cin), static_cast<std::size_t>(k),
          static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
}

Shape5 vec(int c) { return {static_cast<std::size_t>(c), 1, 1, 1, 1}; }

// Walks the topology once, in execution order. Both the static layer list and
// the parameter layout are derived from this single description.
template <typename Visit>
void walk(const NetConfig& cfg, Visit&& visit) {
  auto c = [&](int l) { return cfg.channels(l); };
  visit(LayerSpec{LayerKind::concat, "input", 1, 2});
  int cin = 2;
  for (int l = 0; l < kDepth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    visit(LayerSpec{LayerKind::gated_conv, p + ".conv", cin, c(l), 1});
    visit(LayerSpec{LayerKind::norm, p + ".norm", c(l), c(l)});
    visit(LayerSpec{LayerKind::max_pool, p + ".pool", c(l), c(l)});
    cin = c(l);
  }
  const int cb = c(kDepth);
  for (int i = 0; i < kBottleneckConvs; ++i) {
    const std::string p = "bott" + std::to_string(i);
    visit(LayerSpec{LayerKind::gated_conv, p + ".conv", i == 0 ? cin : cb, cb, cfg.bottleneck_dilation});
    visit(LayerSpec{LayerKind::norm, p + ".norm", cb, cb});
  }
  visit(LayerSpec{LayerKind::nonlocal, "nonlocal", cb, cb});
  cin = cb;
  for (int l = kDepth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    visit(LayerSpec{LayerKind::deconv, p + ".up", cin, c(l)});
    visit(LayerSpec{LayerKind::concat, p + ".skip", c(l), 2 * c(l)});
    cin = 2 * c(l);
    if (l <= 1) {
      visit(LayerSpec{LayerKind::gated_conv, p + ".conv", cin, c(l), 1});
      visit(LayerSpec{LayerKind::norm, p + ".norm", c(l), c(l)});
      cin = c(l);
    }
  }
  visit(LayerSpec{LayerKind::linear_conv, "out", cin, 1});
}

void count(LayerCensus& census, const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::gated_conv:
      (s.dilation == 1 ? census.gated_dilation1 : census.gated_dilation2)++;
      break;
    case LayerKind::max_pool: census.max_pools++; break;
    case LayerKind::deconv: census.deconvs++; break;
    case LayerKind::nonlocal: census.nonlocal_blocks++; break;
    case LayerKind::norm: census.normalizations++; break;
    case LayerKind::concat: census.concatenations++; break;
    case LayerKind::linear_conv: census.linear_convs++; break;
  }
}

struct ParamShape {
  std::string name;
  Shape5 shape;
  std::size_t fan_in = 0;  // 0: bias-like, initialized to `fill`
  double fill = 0.0;
};

std::vector<ParamShape> param_layout(const NetConfig& cfg) {
  std::vector<ParamShape> out;
  auto conv = [&](const std::string& n, int cout, int cin, int k) {
    out.push_back({n + ".w", conv_w(cout, cin, k), static_cast<std::size_t>(cin * k * k * k)});
    out.push_back({n + ".b", vec(cout)});
  };
  walk(cfg, [&](const LayerSpec& s) {
    switch (s.kind) {
      case LayerKind::gated_conv:
        conv(s.name + ".feat", s.out_channels, s.in_channels, 3);
        conv(s.name + ".gate", s.out_channels, s.in_channels, 3);
        break;
      case LayerKind::norm:
        out.push_back({s.name + ".gamma", vec(s.out_channels), 0, 1.0});
        out.push_back({s.name + ".beta", vec(s.out_channels)});
        break;
      case LayerKind::nonlocal: {
        const int inner = std::max(1, s.in_channels / 2);
        conv(s.name + ".theta", inner, s.in_channels, 1);
        conv(s.name + ".phi", inner, s.in_channels, 1);
        conv(s.name + ".g", inner, s.in_channels, 1);
        conv(s.name + ".out", s.in_channels, inner, 1);
        break;
      }
      case LayerKind::deconv:
        out.push_back({s.name + ".w", conv_w(s.in_channels, s.out_channels, 3),
                       static_cast<std::size_t>(s.in_channels * 27)});
        out.push_back({s.name + ".b", vec(s.out_channels)});
        break;
      case LayerKind::linear_conv:
        conv(s.name, s.out_channels, s.in_channels, 3);
        break;
      case LayerKind::max_pool:
      case LayerKind::concat:
        break;
    }
  });
  return out;
}

}  // namespace

NetConfig NetConfig::toy() { return NetConfig{}; }

NetConfig NetConfig::paper_shape() {
  NetConfig c;
  c.base_channels = 16;
  c.input_shape = {160, 160, 160};
  return c;
}

void NetConfig::validate() const {
  if (depth != kDepth) fail(ErrorCode::invalid_argument, "network depth must be 4 pooling levels");
  if (base_channels < 1 || base_channels > 1024) fail(ErrorCode::invalid_argument, "base_channels out of range");
  if (bottleneck_dilation < 1 || bottleneck_dilation > 2)
    fail(ErrorCode::invalid_argument, "bottleneck dilation must be 1 or 2");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail(ErrorCode::invalid_argument, "leaky_slope must be in [0, 1)");
  if (!(norm_eps > 0.0)) fail(ErrorCode::invalid_argument, "norm_eps must be positive");
  require_divisible(input_shape[0], input_shape[1], input_shape[2]);
}

void NetConfig::require_divisible(std::size_t d, std::size_t h, std::size_t w) const {
  const std::size_t m = std::size_t{1} << depth;
  for (std::size_t v : {d, h, w}) {
    if (v == 0 || v % m != 0) {
      fail(ErrorCode::dim_mismatch, "spatial dims " + std::to_string(d) + "x" + std::to_string(h) + "x" +
                                        std::to_string(w) + " must be positive multiples of " +
                                        std::to_string(m));
    }
  }
}

nlohmann::json NetConfig::to_json() const {
  return {{"base_channels", base_channels},   {"depth", depth},
          {"leaky_slope", leaky_slope},       {"norm_kind", "instance"},
          {"norm_eps", norm_eps},             {"bottleneck_dilation", bottleneck_dilation},
          {"input_shape", input_shape},       {"attention_cap", attention_cap}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  NetConfig c;
  try {
    c.base_channels = j.value("base_channels", c.base_channels);
    c.depth = j.value("depth", c.depth);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.bottleneck_dilation = j.value("bottleneck_dilation", c.bottleneck_dilation);
    c.input_shape = j.value("input_shape", c.input_shape);
    c.attention_cap = j.value("attention_cap", c.attention_cap);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json LayerCensus::to_json() const {
  return {{"gated_dilation1", gated_dilation1}, {"gated_dilation2", gated_dilation2},
          {"max_pools", max_pools},             {"deconvs", deconvs},
          {"nonlocal_blocks", nonlocal_blocks}, {"normalizations", normalizations},
          {"concatenations", concatenations},   {"linear_convs", linear_convs}};
}

LayerCensus reference_census() { return {6, 3, 4, 4, 1, 9, 5, 1}; }

std::vector<LayerSpec> architecture(const NetConfig& cfg) {
  std::vector<LayerSpec> out;
  walk(cfg, [&](const LayerSpec& s) { out.push_back(s); });
  return out;
}

LayerCensus census_of(const std::vector<LayerSpec>& layers) {
  LayerCensus c;
  for (const auto& s : layers) count(c, s);
  return c;
}

void ParamStore::add(const std::string& name, Shape5 shape, std::vector<double> values) {
  if (contains(name)) fail(ErrorCode::invalid_argument, "duplicate parameter " + name);
  index_[name] = entries_.size();
  const std::size_t n = shape.count();
  entries_.push_back({name, Tensor::parameter(shape, std::move(values)), std::vector<double>(n, 0.0)});
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::checkpoint_mismatch, "missing parameter " + name);
  return entries_[it->second].value;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

ParamStore init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  std::uint64_t stream = 0;
  for (const auto& p : param_layout(cfg)) {
    std::vector<double> v(p.shape.count(), p.fill);
    if (p.fan_in > 0) {
      std::mt19937_64 rng(derive_seed(seed, 100 + stream));
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      const double bound = std::sqrt(3.0 / static_cast<double>(p.fan_in));
      for (double& x : v) x = bound * u(rng);
    }
    ++stream;
    store.add(p.name, p.shape, std::move(v));
  }
  return store;
}

ParamStore zero_params(const NetConfig& cfg) {
  cfg.validate();
  ParamStore store;
  for (const auto& p : param_layout(cfg)) store.add(p.name, p.shape, std::vector<double>(p.shape.count(), 0.0));
  return store;
}

Tensor forward_net(const NetConfig& cfg, const ParamStore& params, const Tensor& field,
                   const Tensor& mask, LayerCensus* executed) {
  const Shape5 fs = field.shape();
  if (fs.c != 1 || !(mask.shape() == fs)) {
    fail(ErrorCode::dim_mismatch, "network inputs must be matching (N, 1, d, h, w) field and mask tensors");
  }
  cfg.require_divisible(fs.d, fs.h, fs.w);
  LayerCensus local;
  LayerCensus& census = executed ? *executed : local;
  auto P = [&](const std::string& n) -> const Tensor& { return params.get(n); };
  auto conv_p = [&](const std::string& n) { return ConvParams{P(n + ".w"), P(n + ".b")}; };
  auto gconv = [&](const Tensor& x, const std::string& n, int dil) {
    count(census, {LayerKind::gated_conv, n, 0, 0, dil});
    return gated_conv3(x, GatedConvParams{conv_p(n + ".feat"), conv_p(n + ".gate")}, dil, cfg.leaky_slope);
  };
  auto norm = [&](const Tensor& x, const std::string& n) {
    count(census, {LayerKind::norm, n});
    return instance_norm(x, P(n + ".gamma"), P(n + ".beta"), cfg.norm_eps);
  };
  auto concat = [&](const Tensor& a, const Tensor& b) {
    count(census, {LayerKind::concat, ""});
    return concat_channels(a, b);
  };

  Tensor x = concat(field, mask);
  std::vector<Tensor> skips;
  for (int l = 0; l < kDepth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    x = norm(gconv(x, p + ".conv", 1), p + ".norm");
    skips.push_back(x);
    count(census, {LayerKind::max_pool, ""});
    x = max_pool2(x);
  }
  for (int i = 0; i < kBottleneckConvs; ++i) {
    const std::string p = "bott" + std::to_string(i);
    x = norm(gconv(x, p + ".conv", cfg.bottleneck_dilation), p + ".norm");
  }
  count(census, {LayerKind::nonlocal, ""});
  x = nonlocal_block(x,
                     NonLocalParams{conv_p("nonlocal.theta"), conv_p("nonlocal.phi"), conv_p("nonlocal.g"),
                                    conv_p("nonlocal.out")},
                     cfg.attention_cap);
  for (int l = kDepth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    count(census, {LayerKind::deconv, ""});
    x = leaky_relu(conv_transpose3d_x2(x, P(p + ".up.w"), P(p + ".up.b")), cfg.leaky_slope);
    x = concat(x, skips[static_cast<std::size_t>(l)]);
    if (l <= 1) x = norm(gconv(x, p + ".conv", 1), p + ".norm");
  }
  count(census, {LayerKind::linear_conv, ""});
  return conv3d(x, P("out.w"), P("out.b"));
}

}  // namespace qsm::nn
