#include "qsm/nn/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "qsm/error.hpp"

namespace qsm::nn {
namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using SMapR = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;
using CSMapR = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;

constexpr long kColumnBudget = 1L << 18;  // doubles per column slab (2 MiB)

struct Spatial {
  long d, h, w;
  std::size_t count() const { return static_cast<std::size_t>(d * h * w); }
};

Spatial spatial_of(const Shape5& s) {
  return {static_cast<long>(s.d), static_cast<long>(s.h), static_cast<long>(s.w)};
}

// Valid output range [lo, hi) along one axis for a tap offset.
inline void valid_range(long n, long off, long& lo, long& hi) {
  lo = std::min(n, std::max(0L, -off));
  hi = std::min(n, n - off);
  if (hi < lo) hi = lo;
}

// Column buffer for output planes [z0, z1): row r holds tap r for each of the
// (z1 - z0) * h * w positions.
void im2col(const double* x, long cin, Spatial s, int k, int dil, long z0, long z1, double* col) {
  const long c = k / 2;
  const std::size_t plane = s.count();
  const std::size_t pc = static_cast<std::size_t>((z1 - z0) * s.h * s.w);
  std::size_t row = 0;
  for (long ci = 0; ci < cin; ++ci) {
    const double* xc = x + ci * static_cast<long>(plane);
    for (long kz = 0; kz < k; ++kz)
      for (long ky = 0; ky < k; ++ky)
        for (long kx = 0; kx < k; ++kx, ++row) {
          double* out = col + row * pc;
          const long oz = (kz - c) * dil, oy = (ky - c) * dil, ox = (kx - c) * dil;
          long x0, x1;
          valid_range(s.w, ox, x0, x1);
          for (long z = z0; z < z1; ++z) {
            const long sz = z + oz;
            for (long y = 0; y < s.h; ++y) {
              double* o = out + ((z - z0) * s.h + y) * s.w;
              const long sy = y + oy;
              if (sz < 0 || sz >= s.d || sy < 0 || sy >= s.h) {
                std::fill(o, o + s.w, 0.0);
                continue;
              }
              const double* src = xc + (sz * s.h + sy) * s.w + ox;
              std::fill(o, o + x0, 0.0);
              std::copy(src + x0, src + x1, o + x0);
              std::fill(o + x1, o + s.w, 0.0);
            }
          }
        }
  }
}

void col2im(const double* col, long cin, Spatial s, int k, int dil, long z0, long z1, double* dx) {
  const long c = k / 2;
  const std::size_t plane = s.count();
  const std::size_t pc = static_cast<std::size_t>((z1 - z0) * s.h * s.w);
  std::size_t row = 0;
  for (long ci = 0; ci < cin; ++ci) {
    double* xc = dx + ci * static_cast<long>(plane);
    for (long kz = 0; kz < k; ++kz)
      for (long ky = 0; ky < k; ++ky)
        for (long kx = 0; kx < k; ++kx, ++row) {
          const double* in = col + row * pc;
          const long oz = (kz - c) * dil, oy = (ky - c) * dil, ox = (kx - c) * dil;
          long x0, x1;
          valid_range(s.w, ox, x0, x1);
          for (long z = z0; z < z1; ++z) {
            const long sz = z + oz;
            if (sz < 0 || sz >= s.d) continue;
            for (long y = 0; y < s.h; ++y) {
              const long sy = y + oy;
              if (sy < 0 || sy >= s.h) continue;
              const double* src = in + ((z - z0) * s.h + y) * s.w;
              double* dst = xc + (sz * s.h + sy) * s.w + ox;
              for (long xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
            }
          }
        }
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorCode::dim_mismatch, what);
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation) {
  const Shape5 xs = x.shape(), ws = w.shape();
  require(ws.d == ws.h && ws.h == ws.w && ws.d % 2 == 1, "conv3d: kernel must be odd and cubic");
  require(ws.c == xs.c, "conv3d: channel mismatch, input has " + std::to_string(xs.c) +
                            " channels, weights expect " + std::to_string(ws.c));
  if (b) require(b.size() == ws.n, "conv3d: bias size mismatch");
  require(dilation >= 1, "conv3d: dilation must be >= 1");

  const int k = static_cast<int>(ws.d);
  const long cin = static_cast<long>(xs.c), cout = static_cast<long>(ws.n);
  const Spatial s = spatial_of(xs);
  const long P = static_cast<long>(s.count()), K = cin * k * k * k;
  const Shape5 os{xs.n, ws.n, xs.d, xs.h, xs.w};

  std::vector<Tensor> parents{x, w};
  if (b) parents.push_back(b);
  const bool has_bias = static_cast<bool>(b);

  // Work on slabs of whole z-planes so the column buffer stays cache sized.
  const long plane = s.h * s.w;
  const long slab = std::clamp<long>(kColumnBudget / std::max<long>(1, K * plane), 1, s.d);

  Tensor out = make_result(os, parents, "conv3d", [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Buffer col(static_cast<std::size_t>(K * slab * plane));
    CMapR W(wn.value.data(), cout, K);
    for (std::size_t n = 0; n < xs.n; ++n) {
      const double* xptr = xn.value.data() + n * static_cast<std::size_t>(cin * P);
      const double* dy = self.grad.data() + n * static_cast<std::size_t>(cout * P);
      if (has_bias && self.parents[2]->requires_grad) {
        auto& db = self.parents[2]->ensure_grad();
        // Plain loop: Eigen's vectorized reduction order depends on the row's
        // address alignment, which would break run-to-run bit reproducibility.
        for (long co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (long p = 0; p < P; ++p) acc += dy[co * P + p];
          db[co] += acc;
        }
      }
      for (long z0 = 0; z0 < s.d; z0 += slab) {
        const long z1 = std::min(s.d, z0 + slab), pc = (z1 - z0) * plane;
        CSMapR dY(dy + z0 * plane, cout, pc, Eigen::OuterStride<>(P));
        if (wn.requires_grad) {
          im2col(xptr, cin, s, k, dilation, z0, z1, col.data());
          MapR dW(wn.ensure_grad().data(), cout, K);
          dW.noalias() += dY * CMapR(col.data(), K, pc).transpose();
        }
        if (xn.requires_grad) {
          MapR dC(col.data(), K, pc);
          dC.noalias() = W.transpose() * dY;
          col2im(col.data(), cin, s, k, dilation, z0, z1,
                 xn.ensure_grad().data() + n * static_cast<std::size_t>(cin * P));
        }
      }
    }
  });

  Buffer col(static_cast<std::size_t>(K * slab * plane));
  CMapR W(w.value().data(), cout, K);
  for (std::size_t n = 0; n < xs.n; ++n) {
    double* y = out.mutable_value().data() + n * static_cast<std::size_t>(cout * P);
    for (long z0 = 0; z0 < s.d; z0 += slab) {
      const long z1 = std::min(s.d, z0 + slab), pc = (z1 - z0) * plane;
      im2col(x.value().data() + n * static_cast<std::size_t>(cin * P), cin, s, k, dilation, z0, z1, col.data());
      SMapR Y(y + z0 * plane, cout, pc, Eigen::OuterStride<>(P));
      Y.noalias() = W * CMapR(col.data(), K, pc);
    }
    if (has_bias) {
      for (long co = 0; co < cout; ++co) {
        for (long p = 0; p < P; ++p) y[co * P + p] += b.value()[co];
      }
    }
  }
  return out;
}

namespace {

// Scatter/gather between the (Cout*27, P_in) column buffer and a doubled output
// grid, with o = 2 i - 1 + k on every axis.
template <bool Scatter>
void transpose_cols(double* col, long cout, Spatial in, double* out) {
  const Spatial o{2 * in.d, 2 * in.h, 2 * in.w};
  const std::size_t pin = in.count(), pout = o.count();
  for (long co = 0; co < cout; ++co) {
    double* oc = out + co * static_cast<long>(pout);
    for (long kz = 0; kz < 3; ++kz)
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          double* row = col + ((co * 3 + kz) * 3 * 3 + ky * 3 + kx) * static_cast<long>(pin);
          for (long z = 0; z < in.d; ++z) {
            const long oz = 2 * z - 1 + kz;
            if (oz < 0 || oz >= o.d) {
              if constexpr (!Scatter) std::fill(row + z * in.h * in.w, row + (z + 1) * in.h * in.w, 0.0);
              continue;
            }
            for (long y = 0; y < in.h; ++y) {
              const long oy = 2 * y - 1 + ky;
              double* r = row + (z * in.h + y) * in.w;
              if (oy < 0 || oy >= o.h) {
                if constexpr (!Scatter) std::fill(r, r + in.w, 0.0);
                continue;
              }
              double* orow = oc + (oz * o.h + oy) * o.w;
              for (long x = 0; x < in.w; ++x) {
                const long ox = 2 * x - 1 + kx;
                if (ox < 0 || ox >= o.w) {
                  if constexpr (!Scatter) r[x] = 0.0;
                  continue;
                }
                if constexpr (Scatter) {
                  orow[ox] += r[x];
                } else {
                  r[x] = orow[ox];
                }
              }
            }
          }
        }
  }
}

}  // namespace

Tensor conv_transpose3d_x2(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Shape5 xs = x.shape(), ws = w.shape();
  require(ws.d == 3 && ws.h == 3 && ws.w == 3, "conv_transpose3d_x2: kernel must be 3x3x3");
  require(ws.n == xs.c, "conv_transpose3d_x2: channel mismatch");
  const long cin = static_cast<long>(xs.c), cout = static_cast<long>(ws.c);
  if (b) require(b.size() == ws.c, "conv_transpose3d_x2: bias size mismatch");
  const Spatial s = spatial_of(xs);
  const long P = static_cast<long>(s.count()), K = cout * 27;
  const Shape5 os{xs.n, ws.c, 2 * xs.d, 2 * xs.h, 2 * xs.w};
  const long Pout = static_cast<long>(os.spatial());
  const bool has_bias = static_cast<bool>(b);

  std::vector<Tensor> parents{x, w};
  if (b) parents.push_back(b);

  Tensor out = make_result(os, parents, "deconv3d", [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    Buffer col(static_cast<std::size_t>(K * P));
    CMapR W(wn.value.data(), cin, K);
    for (std::size_t n = 0; n < xs.n; ++n) {
      double* dy = self.grad.data() + n * static_cast<std::size_t>(cout * Pout);
      transpose_cols<false>(col.data(), cout, s, dy);
      CMapR dC(col.data(), K, P);
      CMapR X(xn.value.data() + n * static_cast<std::size_t>(cin * P), cin, P);
      if (wn.requires_grad) {
        MapR dW(wn.ensure_grad().data(), cin, K);
        dW.noalias() += X * dC.transpose();
      }
      if (xn.requires_grad) {
        MapR dX(xn.ensure_grad().data() + n * static_cast<std::size_t>(cin * P), cin, P);
        dX.noalias() += W * dC;
      }
      if (has_bias && self.parents[2]->requires_grad) {
        auto& db = self.parents[2]->ensure_grad();
        for (long co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (long p = 0; p < Pout; ++p) acc += dy[co * Pout + p];
          db[co] += acc;
        }
      }
    }
  });

  Buffer col(static_cast<std::size_t>(K * P));
  CMapR W(w.value().data(), cin, K);
  for (std::size_t n = 0; n < xs.n; ++n) {
    CMapR X(x.value().data() + n * static_cast<std::size_t>(cin * P), cin, P);
    MapR C(col.data(), K, P);
    C.noalias() = W.transpose() * X;
    double* y = out.mutable_value().data() + n * static_cast<std::size_t>(cout * Pout);
    transpose_cols<true>(col.data(), cout, s, y);
    if (has_bias) {
      for (long co = 0; co < cout; ++co) {
        for (long p = 0; p < Pout; ++p) y[co * Pout + p] += b.value()[co];
      }
    }
  }
  return out;
}

Tensor max_pool2(const Tensor& x) {
  const Shape5 xs = x.shape();
  require(xs.d % 2 == 0 && xs.h % 2 == 0 && xs.w % 2 == 0,
          "max_pool2: spatial dims must be even, got " + to_string(xs));
  const Shape5 os{xs.n, xs.c, xs.d / 2, xs.h / 2, xs.w / 2};
  auto argmax = std::make_shared<std::vector<std::size_t>>(os.count());
  Tensor out = make_result(os, {x}, "max_pool2", [argmax](Node& self) {
    Node& xn = *self.parents[0];
    auto& dx = xn.ensure_grad();
    for (std::size_t o = 0; o < argmax->size(); ++o) dx[(*argmax)[o]] += self.grad[o];
  });
  const auto& xv = x.value();
  auto ov = out.mutable_value();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
    const std::size_t base = nc * xs.spatial();
    for (std::size_t z = 0; z < os.d; ++z)
      for (std::size_t y = 0; y < os.h; ++y)
        for (std::size_t xx = 0; xx < os.w; ++xx, ++o) {
          std::size_t best = base + ((2 * z) * xs.h + 2 * y) * xs.w + 2 * xx;
          for (std::size_t c = 1; c < 8; ++c) {
            const std::size_t idx =
                base + ((2 * z + (c >> 2)) * xs.h + 2 * y + ((c >> 1) & 1)) * xs.w + 2 * xx + (c & 1);
            if (xv[idx] > xv[best]) best = idx;
          }
          (*argmax)[o] = best;
          ov[o] = xv[best];
        }
  }
  return out;
}

Tensor leaky_relu(const Tensor& x, double slope) {
  Tensor out = make_result(x.shape(), {x}, "leaky_relu", [slope](Node& self) {
    Node& xn = *self.parents[0];
    auto& dx = xn.ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      dx[i] += self.grad[i] * (xn.value[i] > 0.0 ? 1.0 : slope);
    }
  });
  auto ov = out.mutable_value();
  const auto xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_result(x.shape(), {x}, "sigmoid", [](Node& self) {
    Node& xn = *self.parents[0];
    auto& dx = xn.ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double s = self.value[i];
      dx[i] += self.grad[i] * s * (1.0 - s);
    }
  });
  auto ov = out.mutable_value();
  const auto xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out = make_result(a.shape(), {a, b}, "add", [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& pn = *self.parents[p];
      if (!pn.requires_grad) continue;
      auto& g = pn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.value()[i] + b.value()[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = make_result(a.shape(), {a, b}, "mul", [](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  });
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a.value()[i] * b.value()[i];
  return out;
}

Tensor scale(const Tensor& x, double s) {
  Tensor out = make_result(x.shape(), {x}, "scale", [s](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = s * x.value()[i];
  return out;
}

Tensor gated_activation(const Tensor& pre, double slope) {
  const Shape5 ps = pre.shape();
  require(ps.c % 2 == 0, "gated_activation: channel count must be even");
  const Shape5 os{ps.n, ps.c / 2, ps.d, ps.h, ps.w};
  const std::size_t half = os.c * os.spatial();
  Tensor out = make_result(os, {pre}, "gated_activation", [=](Node& self) {
    Node& pn = *self.parents[0];
    auto& g = pn.ensure_grad();
    for (std::size_t n = 0; n < os.n; ++n) {
      const std::size_t ib = n * 2 * half, ob = n * half;
      for (std::size_t i = 0; i < half; ++i) {
        const double f = pn.value[ib + i], q = pn.value[ib + half + i];
        const double act = f > 0.0 ? f : slope * f;
        const double sg = 1.0 / (1.0 + std::exp(-q));
        const double dy = self.grad[ob + i];
        g[ib + i] += dy * sg * (f > 0.0 ? 1.0 : slope);
        g[ib + half + i] += dy * act * sg * (1.0 - sg);
      }
    }
  });
  auto ov = out.mutable_value();
  const auto pv = pre.value();
  for (std::size_t n = 0; n < os.n; ++n) {
    const std::size_t ib = n * 2 * half, ob = n * half;
    for (std::size_t i = 0; i < half; ++i) {
      const double f = pv[ib + i], q = pv[ib + half + i];
      ov[ob + i] = (f > 0.0 ? f : slope * f) / (1.0 + std::exp(-q));
    }
  }
  return out;
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Shape5 xs = x.shape();
  require(gamma.size() == xs.c && beta.size() == xs.c, "instance_norm: affine size mismatch");
  const std::size_t S = xs.spatial();
  auto stats = std::make_shared<std::vector<double>>(xs.n * xs.c);  // 1/sqrt(var + eps)
  auto xhat = std::make_shared<std::vector<double>>(xs.count());

  Tensor out = make_result(xs, {x, gamma, beta}, "instance_norm", [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t c = 0; c < xs.c; ++c) {
        const std::size_t base = (n * xs.c + c) * S;
        const double* dy = self.grad.data() + base;
        const double* xh = xhat->data() + base;
        double sdy = 0.0, sdyx = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
          sdy += dy[i];
          sdyx += dy[i] * xh[i];
        }
        if (gn.requires_grad) gn.ensure_grad()[c] += sdyx;
        if (bn.requires_grad) bn.ensure_grad()[c] += sdy;
        if (xn.requires_grad) {
          const double g = gn.value[c], inv = (*stats)[n * xs.c + c];
          const double m1 = sdy / static_cast<double>(S), m2 = sdyx / static_cast<double>(S);
          double* dx = xn.ensure_grad().data() + base;
          for (std::size_t i = 0; i < S; ++i) dx[i] += g * inv * (dy[i] - m1 - xh[i] * m2);
        }
      }
    }
  });

  auto ov = out.mutable_value();
  const auto xv = x.value();
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const std::size_t base = (n * xs.c + c) * S;
      double mean = 0.0;
      for (std::size_t i = 0; i < S; ++i) mean += xv[base + i];
      mean /= static_cast<double>(S);
      double var = 0.0;
      for (std::size_t i = 0; i < S; ++i) var += (xv[base + i] - mean) * (xv[base + i] - mean);
      var /= static_cast<double>(S);
      const double inv = 1.0 / std::sqrt(var + eps);
      (*stats)[n * xs.c + c] = inv;
      for (std::size_t i = 0; i < S; ++i) {
        const double h = (xv[base + i] - mean) * inv;
        (*xhat)[base + i] = h;
        ov[base + i] = gamma.value()[c] * h + beta.value()[c];
      }
    }
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape5 as = a.shape(), bs = b.shape();
  require(as.n == bs.n && as.d == bs.d && as.h == bs.h && as.w == bs.w,
          "concat_channels: shape mismatch " + to_string(as) + " vs " + to_string(bs));
  const Shape5 os{as.n, as.c + bs.c, as.d, as.h, as.w};
  const std::size_t la = as.c * as.spatial(), lb = bs.c * bs.spatial();
  Tensor out = make_result(os, {a, b}, "concat", [=](Node& self) {
    for (std::size_t n = 0; n < os.n; ++n) {
      const double* g = self.grad.data() + n * (la + lb);
      if (self.parents[0]->requires_grad) {
        double* ga = self.parents[0]->ensure_grad().data() + n * la;
        for (std::size_t i = 0; i < la; ++i) ga[i] += g[i];
      }
      if (self.parents[1]->requires_grad) {
        double* gb = self.parents[1]->ensure_grad().data() + n * lb;
        for (std::size_t i = 0; i < lb; ++i) gb[i] += g[la + i];
      }
    }
  });
  auto ov = out.mutable_value();
  for (std::size_t n = 0; n < os.n; ++n) {
    std::copy_n(a.value().data() + n * la, la, ov.data() + n * (la + lb));
    std::copy_n(b.value().data() + n * lb, lb, ov.data() + n * (la + lb) + la);
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  const Shape5 as = a.shape(), bs = b.shape();
  require(as.c == bs.c && as.d == bs.d && as.h == bs.h && as.w == bs.w, "concat_rows: shape mismatch");
  const Shape5 os{as.n + bs.n, as.c, as.d, as.h, as.w};
  const std::size_t la = a.size();
  Tensor out = make_result(os, {a, b}, "concat_rows", [la](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[la + i];
    }
  });
  auto ov = out.mutable_value();
  std::copy(a.value().begin(), a.value().end(), ov.begin());
  std::copy(b.value().begin(), b.value().end(), ov.begin() + static_cast<long>(la));
  return out;
}

namespace {

// Softmax rows of A = Theta^T Phi for one sample; theta/phi are (C', S).
MatR attention_matrix(const double* theta, const double* phi, long cp, long S) {
  CMapR T(theta, cp, S), F(phi, cp, S);
  MatR P = T.transpose() * F;
  for (long i = 0; i < S; ++i) {
    const double m = P.row(i).maxCoeff();
    P.row(i) = (P.row(i).array() - m).exp();
    P.row(i) /= P.row(i).sum();
  }
  return P;
}

}  // namespace

std::vector<double> attention_weights(const Tensor& theta, const Tensor& phi, std::size_t n) {
  const Shape5 ts = theta.shape();
  const long cp = static_cast<long>(ts.c), S = static_cast<long>(ts.spatial());
  const std::size_t stride = ts.c * ts.spatial();
  MatR P = attention_matrix(theta.value().data() + n * stride, phi.value().data() + n * stride, cp, S);
  return std::vector<double>(P.data(), P.data() + P.size());
}

Tensor attention(const Tensor& theta, const Tensor& phi, const Tensor& g) {
  const Shape5 ts = theta.shape();
  require(ts == phi.shape() && ts == g.shape(), "attention: theta, phi and g must share a shape");
  const long cp = static_cast<long>(ts.c), S = static_cast<long>(ts.spatial());
  const std::size_t stride = ts.c * ts.spatial();
  auto probs = std::make_shared<std::vector<MatR>>(ts.n);

  Tensor out = make_result(ts, {theta, phi, g}, "attention", [=](Node& self) {
    Node& tn = *self.parents[0];
    Node& fn = *self.parents[1];
    Node& gn = *self.parents[2];
    for (std::size_t n = 0; n < ts.n; ++n) {
      const MatR& P = (*probs)[n];
      CMapR dY(self.grad.data() + n * stride, cp, S);
      CMapR G(gn.value.data() + n * stride, cp, S);
      CMapR T(tn.value.data() + n * stride, cp, S);
      CMapR F(fn.value.data() + n * stride, cp, S);
      if (gn.requires_grad) {
        MapR dG(gn.ensure_grad().data() + n * stride, cp, S);
        dG.noalias() += dY * P;
      }
      if (!tn.requires_grad && !fn.requires_grad) continue;
      MatR dP = dY.transpose() * G;
      MatR dA(S, S);
      for (long i = 0; i < S; ++i) {
        const double r = (dP.row(i).array() * P.row(i).array()).sum();
        dA.row(i) = P.row(i).array() * (dP.row(i).array() - r);
      }
      if (tn.requires_grad) {
        MapR dT(tn.ensure_grad().data() + n * stride, cp, S);
        dT.noalias() += F * dA.transpose();
      }
      if (fn.requires_grad) {
        MapR dF(fn.ensure_grad().data() + n * stride, cp, S);
        dF.noalias() += T * dA;
      }
    }
  });

  for (std::size_t n = 0; n < ts.n; ++n) {
    (*probs)[n] = attention_matrix(theta.value().data() + n * stride, phi.value().data() + n * stride, cp, S);
    CMapR G(g.value().data() + n * stride, cp, S);
    MapR Y(out.mutable_value().data() + n * stride, cp, S);
    Y.noalias() = G * (*probs)[n].transpose();
  }
  return out;
}

Tensor l1_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  require(pred.shape() == target.shape() && pred.shape() == mask.shape(), "l1_loss: shape mismatch");
  std::size_t count = 0;
  for (double m : mask.value()) count += m > 0.0 ? 1 : 0;
  if (count == 0) fail(ErrorCode::empty_mask, "l1_loss: mask is empty");
  const double inv = 1.0 / static_cast<double>(count);
  Tensor out = make_result({1, 1, 1, 1, 1}, {pred, target, mask}, "l1_loss", [inv](Node& self) {
    Node& pn = *self.parents[0];
    Node& tn = *self.parents[1];
    Node& mn = *self.parents[2];
    const double g = self.grad[0] * inv;
    for (int which = 0; which < 2; ++which) {
      Node& dst = which == 0 ? pn : tn;
      if (!dst.requires_grad) continue;
      auto& dg = dst.ensure_grad();
      const double sgn = which == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < dg.size(); ++i) {
        if (!(mn.value[i] > 0.0)) continue;
        const double diff = pn.value[i] - tn.value[i];
        dg[i] += sgn * g * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
      }
    }
  });
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask.value()[i] > 0.0) acc += std::abs(pred.value()[i] - target.value()[i]);
  }
  out.mutable_value()[0] = acc * inv;
  return out;
}

Tensor weighted_sum(const Tensor& x, std::vector<double> coeffs) {
  require(coeffs.size() == x.size(), "weighted_sum: coefficient count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < coeffs.size(); ++i) acc += coeffs[i] * x.value()[i];
  Tensor out = make_result({1, 1, 1, 1, 1}, {x}, "weighted_sum", [c = std::move(coeffs)](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * c[i];
  });
  out.mutable_value()[0] = acc;
  return out;
}

Tensor gated_conv3(const Tensor& x, const GatedConvParams& p, int dilation, double slope) {
  require(p.feat.w.shape() == p.gate.w.shape(), "gated_conv3: feature and gate weights differ in shape");
  require(p.feat.w.shape().d == 3, "gated_conv3: kernel must be 3x3x3");
  const Tensor w = concat_rows(p.feat.w, p.gate.w);
  const Tensor b = concat_rows(p.feat.b, p.gate.b);
  return gated_activation(conv3d(x, w, b, dilation), slope);
}

Tensor nonlocal_block(const Tensor& x, const NonLocalParams& p, std::size_t max_positions) {
  const std::size_t S = x.shape().spatial();
  if (S > max_positions) {
    fail(ErrorCode::memory_cap, "non-local block: " + std::to_string(S) +
                                    " positions exceed the attention cap of " +
                                    std::to_string(max_positions) +
                                    "; use a smaller bottleneck (deeper network or smaller input)");
  }
  const Tensor th = conv3d(x, p.theta.w, p.theta.b);
  const Tensor ph = conv3d(x, p.phi.w, p.phi.b);
  const Tensor gg = conv3d(x, p.g.w, p.g.b);
  const Tensor y = attention(th, ph, gg);
  return add(conv3d(y, p.out.w, p.out.b), x);
}

}  // namespace qsm::nn
