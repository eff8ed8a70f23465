#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "qsm/error.hpp"
#include "qsm/nn/checkpoint.hpp"
#include "qsm/nn/net.hpp"
#include "qsm/nn/ops.hpp"
#include "qsm/nn/optim.hpp"
#include "qsm/nn/train.hpp"
#include "qsm/phantom.hpp"
#include "qsm/volume_io.hpp"
#include "support/gradcheck.hpp"
#include "support/nn_oracles.hpp"

using namespace qsm;
using namespace qsm::nn;
using qsm::testing::grad_check;
using qsm::testing::nonlocal_oracle;
using qsm::testing::probe;
using qsm::testing::random_gated;
using qsm::testing::random_nonlocal;
using qsm::testing::random_param;
using qsm::testing::random_values;

namespace {

std::size_t at5(const Shape5& s, std::size_t n, std::size_t c, long z, long y, long x) {
  return (((n * s.c + c) * s.d + static_cast<std::size_t>(z)) * s.h + static_cast<std::size_t>(y)) * s.w +
         static_cast<std::size_t>(x);
}

// Direct nested-loop convolution with zero padding.
std::vector<double> direct_conv(const Tensor& x, const Tensor& w, const Tensor& b, int dil) {
  const Shape5 xs = x.shape(), ws = w.shape();
  const long k = static_cast<long>(ws.d), c = k / 2;
  const Shape5 os{xs.n, ws.n, xs.d, xs.h, xs.w};
  std::vector<double> out(os.count());
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t co = 0; co < ws.n; ++co)
      for (long z = 0; z < static_cast<long>(xs.d); ++z)
        for (long y = 0; y < static_cast<long>(xs.h); ++y)
          for (long xx = 0; xx < static_cast<long>(xs.w); ++xx) {
            double acc = b.value()[co];
            for (std::size_t ci = 0; ci < xs.c; ++ci)
              for (long kz = 0; kz < k; ++kz)
                for (long ky = 0; ky < k; ++ky)
                  for (long kx = 0; kx < k; ++kx) {
                    const long sz = z + (kz - c) * dil, sy = y + (ky - c) * dil, sx = xx + (kx - c) * dil;
                    if (sz < 0 || sy < 0 || sx < 0 || sz >= static_cast<long>(xs.d) ||
                        sy >= static_cast<long>(xs.h) || sx >= static_cast<long>(xs.w))
                      continue;
                    acc += w.value()[at5(ws, co, ci, kz, ky, kx)] * x.value()[at5(xs, n, ci, sz, sy, sx)];
                  }
            out[at5(os, n, co, z, y, xx)] = acc;
          }
  return out;
}

// Direct scatter form of the stride-2 transposed convolution.
std::vector<double> direct_deconv(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Shape5 xs = x.shape(), ws = w.shape();
  const Shape5 os{xs.n, ws.c, 2 * xs.d, 2 * xs.h, 2 * xs.w};
  std::vector<double> out(os.count());
  for (std::size_t n = 0; n < os.n; ++n)
    for (std::size_t co = 0; co < os.c; ++co)
      for (std::size_t i = 0; i < os.spatial(); ++i) out[(n * os.c + co) * os.spatial() + i] = b.value()[co];
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t ci = 0; ci < xs.c; ++ci)
      for (long z = 0; z < static_cast<long>(xs.d); ++z)
        for (long y = 0; y < static_cast<long>(xs.h); ++y)
          for (long xx = 0; xx < static_cast<long>(xs.w); ++xx)
            for (std::size_t co = 0; co < ws.c; ++co)
              for (long kz = 0; kz < 3; ++kz)
                for (long ky = 0; ky < 3; ++ky)
                  for (long kx = 0; kx < 3; ++kx) {
                    const long oz = 2 * z - 1 + kz, oy = 2 * y - 1 + ky, ox = 2 * xx - 1 + kx;
                    if (oz < 0 || oy < 0 || ox < 0 || oz >= static_cast<long>(os.d) ||
                        oy >= static_cast<long>(os.h) || ox >= static_cast<long>(os.w))
                      continue;
                    out[at5(os, n, co, oz, oy, ox)] +=
                        x.value()[at5(xs, n, ci, z, y, xx)] * w.value()[at5(ws, ci, co, kz, ky, kx)];
                  }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<PhantomPair> tiny_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<PhantomPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    PhantomSpec spec;
    spec.grid = Grid{Dims{size, size, size}, VoxelSize{1.0, 1.0, 1.0}};
    spec.seed = derive_seed(seed, i);
    spec.n_shapes = 2;
    spec.elastic.grid_spacing_vox = 4.0;
    spec.elastic.max_displacement_vox = 1.0;
    out.push_back(generate_phantom(spec));
  }
  return out;
}

NetConfig tiny_net(std::size_t size) {
  NetConfig c;
  c.base_channels = 2;
  c.input_shape = {size, size, size};
  return c;
}

}  // namespace

TEST_CASE("conv3d matches direct convolution for dilation 1 and 2") {
  const Tensor x = random_param({2, 3, 5, 4, 6}, 11);
  const Tensor w = random_param({4, 3, 3, 3, 3}, 12);
  const Tensor b = random_param({4, 1, 1, 1, 1}, 13);
  for (int dil : {1, 2}) {
    const Tensor y = conv3d(x, w, b, dil);
    CHECK(y.shape() == Shape5{2, 4, 5, 4, 6});
    CHECK(max_abs_diff(y.value(), direct_conv(x, w, b, dil)) < 1e-12);
  }
  const Tensor w1 = random_param({2, 3, 1, 1, 1}, 14);
  const Tensor b1 = random_param({2, 1, 1, 1, 1}, 15);
  CHECK(max_abs_diff(conv3d(x, w1, b1).value(), direct_conv(x, w1, b1, 1)) < 1e-12);
}

TEST_CASE("conv3d rejects a channel mismatch") {
  const Tensor x = random_param({1, 2, 4, 4, 4}, 1);
  const Tensor w = random_param({4, 3, 3, 3, 3}, 2);
  const Tensor b = random_param({4, 1, 1, 1, 1}, 3);
  CHECK_THROWS_AS(conv3d(x, w, b), Error);
}

TEST_CASE("transposed convolution matches direct scatter and doubles dims") {
  const Tensor x = random_param({2, 3, 2, 3, 4}, 21);
  const Tensor w = random_param({3, 2, 3, 3, 3}, 22);
  const Tensor b = random_param({2, 1, 1, 1, 1}, 23);
  const Tensor y = conv_transpose3d_x2(x, w, b);
  CHECK(y.shape() == Shape5{2, 2, 4, 6, 8});
  CHECK(max_abs_diff(y.value(), direct_deconv(x, w, b)) < 1e-12);
}

TEST_CASE("pool halves, deconv doubles, encoder-decoder shape algebra closes") {
  Tensor x = random_param({1, 2, 16, 32, 48}, 5);
  Tensor y = x;
  for (int l = 0; l < 4; ++l) y = max_pool2(y);
  CHECK(y.shape() == Shape5{1, 2, 1, 2, 3});
  const Tensor w = random_param({2, 2, 3, 3, 3}, 6), b = random_param({2, 1, 1, 1, 1}, 7);
  for (int l = 0; l < 4; ++l) y = conv_transpose3d_x2(y, w, b);
  CHECK(y.shape() == x.shape());
  CHECK_THROWS_AS(max_pool2(random_param({1, 1, 3, 4, 4}, 8)), Error);
}

TEST_CASE("max_pool2 picks the block maximum") {
  std::vector<double> v(64);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>((i * 37) % 64);
  const Tensor x = Tensor::constant({1, 1, 4, 4, 4}, v);
  const Tensor y = max_pool2(x);
  const Shape5 s = x.shape();
  for (long z = 0; z < 2; ++z)
    for (long yy = 0; yy < 2; ++yy)
      for (long xx = 0; xx < 2; ++xx) {
        double m = -1.0;
        for (long c = 0; c < 8; ++c) m = std::max(m, v[at5(s, 0, 0, 2 * z + (c >> 2), 2 * yy + ((c >> 1) & 1), 2 * xx + (c & 1))]);
        CHECK(y.value()[(z * 2 + yy) * 2 + xx] == m);
      }
}

TEST_CASE("gated conv saturates to its feature branch or to zero") {
  const Tensor x = random_param({1, 2, 4, 4, 4}, 31);
  GatedConvParams p = random_gated(3, 2, 40);
  for (double& v : p.gate.w.mutable_value()) v = 0.0;
  for (double& v : p.gate.b.mutable_value()) v = 30.0;
  const Tensor open = gated_conv3(x, p, 1, 0.2);
  const Tensor feat = leaky_relu(conv3d(x, p.feat.w, p.feat.b), 0.2);
  CHECK(max_abs_diff(open.value(), feat.value()) < 1e-9);
  for (double& v : p.gate.b.mutable_value()) v = -30.0;
  const Tensor closed = gated_conv3(x, p, 1, 0.2);
  for (double v : closed.value()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("gradient check: gated conv, dilation 1 and 2") {
  for (int dil : {1, 2}) {
    const Tensor x = random_param({1, 2, 4, 4, 4}, 50 + dil);
    const GatedConvParams p = random_gated(3, 2, 60 + 10 * dil);
    const auto r = grad_check([&] { return probe(gated_conv3(x, p, dil, 0.2), 7); },
                              {x, p.feat.w, p.feat.b, p.gate.w, p.gate.b});
    INFO("dilation " << dil << " worst " << r.worst_relative);
    CHECK(r.worst_relative < 1e-4);
  }
}

TEST_CASE("gradient check: pool, deconv, norm, leaky relu, sigmoid") {
  const Tensor x = random_param({2, 2, 4, 4, 4}, 70);
  auto r = grad_check([&] { return probe(max_pool2(x), 8); }, {x});
  CHECK(r.worst_relative < 1e-4);

  const Tensor xd = random_param({1, 3, 2, 2, 3}, 71);
  const Tensor w = random_param({3, 2, 3, 3, 3}, 72), b = random_param({2, 1, 1, 1, 1}, 73);
  r = grad_check([&] { return probe(conv_transpose3d_x2(xd, w, b), 9); }, {xd, w, b});
  CHECK(r.worst_relative < 1e-4);

  const Tensor g = random_param({2, 1, 1, 1, 1}, 74), be = random_param({2, 1, 1, 1, 1}, 75);
  r = grad_check([&] { return probe(instance_norm(x, g, be, 1e-5), 10); }, {x, g, be});
  CHECK(r.worst_relative < 1e-4);

  r = grad_check([&] { return probe(sigmoid(leaky_relu(x, 0.2)), 11); }, {x});
  CHECK(r.worst_relative < 1e-4);

  const Tensor y = random_param({2, 2, 4, 4, 4}, 76);
  r = grad_check([&] { return probe(concat_channels(mul(x, y), add(scale(x, 2.0), y)), 12); }, {x, y});
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("instance norm gives zero mean, unit variance per channel before affine") {
  const Tensor x = random_param({2, 3, 4, 4, 4}, 80, 100.0);
  const Tensor g = Tensor::constant({3, 1, 1, 1, 1}, {1, 1, 1});
  const Tensor b = Tensor::zeros({3, 1, 1, 1, 1});
  const Tensor y = instance_norm(x, g, b, 1e-5);
  for (std::size_t nc = 0; nc < 6; ++nc) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 64; ++i) m += y.value()[nc * 64 + i];
    m /= 64;
    for (std::size_t i = 0; i < 64; ++i) v += (y.value()[nc * 64 + i] - m) * (y.value()[nc * 64 + i] - m);
    v /= 64;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("non-local block matches the double-loop attention oracle") {
  const Tensor x = random_param({1, 2, 2, 2, 2}, 90);
  const NonLocalParams p = random_nonlocal(2, 91);
  const Tensor out = nonlocal_block(x, p);

  CHECK(max_abs_diff(out.value(), nonlocal_oracle(x, p)) < 1e-10);
  const Tensor x4 = random_param({1, 4, 2, 3, 2}, 92);
  const NonLocalParams p4 = random_nonlocal(4, 93);
  CHECK(max_abs_diff(nonlocal_block(x4, p4).value(), nonlocal_oracle(x4, p4)) < 1e-10);

  const std::size_t S = x.shape().spatial();
  const auto att = attention_weights(conv3d(x, p.theta.w, p.theta.b), conv3d(x, p.phi.w, p.phi.b), 0);
  for (std::size_t i = 0; i < S; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < S; ++j) row += att[i * S + j];
    CHECK(std::abs(row - 1.0) < 1e-12);
  }
}

TEST_CASE("non-local block: zero output projection is the identity, cap is enforced") {
  const Tensor x = random_param({1, 4, 2, 2, 2}, 95);
  NonLocalParams p = random_nonlocal(4, 96);
  for (double& v : p.out.w.mutable_value()) v = 0.0;
  for (double& v : p.out.b.mutable_value()) v = 0.0;
  CHECK(max_abs_diff(nonlocal_block(x, p).value(), x.value()) == 0.0);
  try {
    nonlocal_block(random_param({1, 4, 4, 4, 4}, 97), p, 32);
    FAIL("expected memory_cap");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::memory_cap);
  }
}

TEST_CASE("gradient check: non-local block") {
  const Tensor x = random_param({2, 4, 2, 2, 2}, 100);
  const NonLocalParams p = random_nonlocal(4, 101);
  const auto r = grad_check([&] { return probe(nonlocal_block(x, p), 13); },
                            {x, p.theta.w, p.theta.b, p.phi.w, p.phi.b, p.g.w, p.g.b, p.out.w, p.out.b});
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("l1 loss values, errors and gradient away from the kink") {
  const Shape5 s{1, 1, 2, 2, 2};
  std::vector<double> m(8, 1.0);
  m[0] = m[5] = 0.0;
  const Tensor mask = Tensor::constant(s, m);
  const Tensor t = random_param(s, 110);
  CHECK(l1_loss(t, t, mask).item() == 0.0);
  std::vector<double> shifted(t.value().begin(), t.value().end());
  for (std::size_t i = 0; i < 8; ++i) shifted[i] += m[i] > 0 ? 1.0 : 50.0;
  CHECK(std::abs(l1_loss(Tensor::constant(s, shifted), t, mask).item() - 1.0) < 1e-14);
  CHECK_THROWS_AS(l1_loss(t, t, Tensor::zeros(s)), Error);

  // Offsets of at least 0.1 keep every voxel far from |pred - target| = 0.
  auto pv = t.value();
  std::vector<double> pred(pv.begin(), pv.end());
  auto off = random_values(8, 111, 0.1, 1.0);
  for (std::size_t i = 0; i < 8; ++i) pred[i] += (i % 2 ? 1 : -1) * off[i];
  const Tensor p = Tensor::parameter(s, pred);
  const auto r = grad_check([&] { return l1_loss(p, t, mask); }, {p});
  CHECK(r.worst_relative < 1e-5);
}

TEST_CASE("RMSprop: zero gradient, closed-form accumulator, schedule, rejection") {
  RmspropConfig cfg;
  CHECK(learning_rate(cfg, 0) == 1e-4);
  CHECK(learning_rate(cfg, 199) == 1e-4);
  CHECK(learning_rate(cfg, 200) == doctest::Approx(1e-4 * 0.95).epsilon(1e-15));
  CHECK(learning_rate(cfg, 399) == learning_rate(cfg, 200));
  CHECK(learning_rate(cfg, 400) == doctest::Approx(1e-4 * 0.95 * 0.95).epsilon(1e-15));

  ParamStore ps;
  ps.add("p", {1, 1, 1, 1, 1}, {0.5});
  ps.entries()[0].accum[0] = 2.0;
  rmsprop_step(ps, {{0.0}}, cfg);
  CHECK(ps.entries()[0].value.value()[0] == 0.5);
  CHECK(ps.entries()[0].accum[0] == doctest::Approx(1.8).epsilon(1e-15));

  ParamStore q;
  q.add("p", {1, 1, 1, 1, 1}, {0.0});
  const double g = 0.37;
  for (int t = 1; t <= 50; ++t) {
    rmsprop_step(q, {{g}}, cfg);
    CHECK(std::abs(q.entries()[0].accum[0] - (1.0 - std::pow(cfg.rho, t)) * g * g) < 1e-12);
  }
  CHECK(q.step == 50);

  const double before = q.entries()[0].value.value()[0];
  CHECK_THROWS_AS(rmsprop_step(q, {{std::nan("")}}, cfg), Error);
  CHECK(q.entries()[0].value.value()[0] == before);
  CHECK(q.step == 50);
}

TEST_CASE("network shape contract, census and zero parameters") {
  const NetConfig toy = NetConfig::toy();
  CHECK(toy.base_channels == 8);
  const ParamStore params = init_params(toy, 3);
  const Tensor f = Tensor::constant({1, 1, 32, 32, 32}, random_values(32768, 1));
  const Tensor m = Tensor::constant({1, 1, 32, 32, 32}, std::vector<double>(32768, 1.0));
  LayerCensus executed;
  const Tensor y = forward_net(toy, params, f, m, &executed);
  CHECK(y.shape() == Shape5{1, 1, 32, 32, 32});
  CHECK(executed == reference_census());
  CHECK(census_of(architecture(NetConfig::paper_shape())) == reference_census());

  const Tensor z = forward_net(toy, zero_params(toy), f, m);
  for (double v : z.value()) CHECK(v == 0.0);

  const Tensor bad = Tensor::zeros({1, 1, 24, 32, 32});
  CHECK_THROWS_AS(forward_net(toy, params, bad, bad), Error);
}

TEST_CASE("gradient check: tiny network end to end") {
  const NetConfig cfg = tiny_net(16);
  ParamStore params = init_params(cfg, 9);
  // Zero-initialized biases and norm shifts put the bottleneck exactly on the
  // LeakyReLU kink (a 1-voxel instance norm outputs its shift); move them off it.
  std::uint64_t k = 0;
  for (auto& e : params.entries()) {
    if (e.value.shape().c != 1 || e.value.shape().d != 1) continue;
    const auto v = random_values(e.value.size(), 500 + k++, -0.5, 0.5);
    for (std::size_t i = 0; i < v.size(); ++i) e.value.mutable_value()[i] += v[i];
  }
  const Tensor f = Tensor::constant({1, 1, 16, 16, 16}, random_values(4096, 2));
  std::vector<double> mv(4096, 1.0);
  const Tensor m = Tensor::constant({1, 1, 16, 16, 16}, mv);
  std::vector<Tensor> inputs;
  for (auto& e : params.entries()) inputs.push_back(e.value);
  const auto r = grad_check([&] { return probe(forward_net(cfg, params, f, m), 14); }, inputs, 1e-5, 3);
  INFO("entries " << r.entries_checked << " worst " << r.worst_relative);
  CHECK(r.worst_relative < 1e-4);
}

TEST_CASE("seeded init is reproducible and zero epochs return it") {
  const NetConfig cfg = tiny_net(16);
  const ParamStore a = init_params(cfg, 5), b = init_params(cfg, 5), c = init_params(cfg, 6);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    const auto va = a.entries()[i].value.value(), vb = b.entries()[i].value.value(),
               vc = c.entries()[i].value.value();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
    any_diff = any_diff || !std::equal(va.begin(), va.end(), vc.begin());
  }
  CHECK(any_diff);

  TrainConfig tc;
  tc.net = cfg;
  tc.epochs = 0;
  tc.seed = 5;
  const auto res = train(tc, tiny_dataset(2, 16, 1));
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    const auto va = a.entries()[i].value.value(), vr = res.params.entries()[i].value.value();
    CHECK(std::equal(va.begin(), va.end(), vr.begin()));
  }
}

TEST_CASE("one small step decreases the loss on its sample") {
  TrainConfig tc;
  tc.net = tiny_net(16);
  tc.optimizer.lr0 = 1e-5;
  tc.epochs = 1;
  tc.batch = 1;
  tc.seed = 4;
  const auto data = tiny_dataset(1, 16, 2);
  const double before = sample_loss(tc.net, init_params(tc.net, tc.seed), data[0]);
  const auto res = train(tc, data);
  CHECK(res.log.step_loss.size() == 1);
  CHECK(res.log.step_loss[0] == before);
  CHECK(sample_loss(tc.net, res.params, data[0]) < before);
}

TEST_CASE("checkpoint roundtrip is bit-exact and resume reproduces uninterrupted training") {
  const auto dir = std::filesystem::temp_directory_path() / "qsm_nn_ckpt_test";
  std::filesystem::create_directories(dir);
  TrainConfig tc;
  tc.net = tiny_net(16);
  tc.optimizer.lr0 = 1e-3;
  tc.epochs = 2;
  tc.seed = 17;
  const auto data = tiny_dataset(3, 16, 3);

  const auto full = train(tc, data, dir / "full.ckpt");
  const Checkpoint ck = load_checkpoint(dir / "full.ckpt");
  CHECK(encode_checkpoint(ck) == read_file(dir / "full.ckpt"));
  CHECK(ck.params.step == full.params.step);

  TrainConfig first = tc;
  first.epochs = 1;
  train(first, data, dir / "part.ckpt");
  const auto resumed = train(tc, data, dir / "part.ckpt", true);
  CHECK(resumed.log.resumed_from_epoch == 1);
  CHECK(resumed.log.step_loss == full.log.step_loss);
  CHECK(encode_checkpoint(load_checkpoint(dir / "part.ckpt")) == encode_checkpoint(ck));

  TrainConfig other = tc;
  other.seed = 18;
  CHECK_THROWS_AS(train(other, data, dir / "part.ckpt", true), Error);

  auto bytes = read_file(dir / "full.ckpt");
  bytes.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(bytes), Error);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("infer: shape, mask and zero field") {
  const NetConfig cfg = tiny_net(64);
  const ParamStore params = init_params(cfg, 2);
  const Grid g{Dims{64, 64, 64}, VoxelSize{1, 1, 1}};
  Volume field = Volume::zeros(g, Unit::ppm);
  const auto rnd = random_values(field.size(), 3);
  for (std::size_t i = 0; i < field.size(); ++i) field[i] = rnd[i];
  Mask mask = Mask::full(g);
  for (std::size_t i = 0; i < mask.size(); i += 3) mask.set(i, false);
  const Volume chi = infer(cfg, params, field, mask);
  CHECK(chi.dims() == g.dims);
  CHECK(chi.unit() == Unit::ppm);
  for (std::size_t i = 0; i < chi.size(); i += 3) CHECK(chi[i] == 0.0);
  const Volume zero = infer(cfg, params, Volume::zeros(g, Unit::ppm), mask);
  for (double v : zero.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(infer(cfg, params, Volume::zeros(Grid{Dims{40, 64, 64}, VoxelSize{1, 1, 1}}, Unit::ppm),
                        Mask::full(Grid{Dims{40, 64, 64}, VoxelSize{1, 1, 1}})),
                  Error);
}
