#pragma once

// Naive reference implementations used as independent oracles. Deliberately
// loop-based and free of the library's kernels.

#include "cgrseg/autodiff.hpp"
#include "cgrseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace oracle {

using cgr::Conv2dOptions;
using cgr::Index;
using cgr::Shape;
using cgr::Tensor;

inline Tensor random_tensor(Shape s, cgr::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// max |a - b| / max |b|; infinite on shape mismatch.
inline double rel_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double num = 0.0, den = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den == 0.0 ? num : num / den;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv2dOptions& o) {
  const Shape xs = x.shape(), ws = w.shape();
  const Index ho = (xs.h + 2 * o.pad_h - ws.h) / o.stride_h + 1;
  const Index wo = (xs.w + 2 * o.pad_w - ws.w) / o.stride_w + 1;
  const Index cin_g = xs.c / o.groups, cout_g = ws.n / o.groups;
  Tensor out(Shape{xs.n, ws.n, ho, wo});
  for (Index n = 0; n < xs.n; ++n)
    for (Index co = 0; co < ws.n; ++co)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          double acc = bias ? (*bias)[co] : 0.0;
          const Index g = co / cout_g;
          for (Index ci = 0; ci < cin_g; ++ci)
            for (Index ky = 0; ky < ws.h; ++ky)
              for (Index kx = 0; kx < ws.w; ++kx) {
                const Index iy = oy * o.stride_h - o.pad_h + ky;
                const Index ix = ox * o.stride_w - o.pad_w + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += x(n, g * cin_g + ci, iy, ix) * w(co, ci, ky, kx);
              }
          out(n, co, oy, ox) = acc;
        }
  return out;
}

struct ConvGrads {
  Tensor input, weight, bias;
};

inline ConvGrads conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& g, const Conv2dOptions& o) {
  const Shape xs = x.shape(), ws = w.shape(), gs = g.shape();
  const Index cin_g = xs.c / o.groups, cout_g = ws.n / o.groups;
  ConvGrads r{Tensor(xs), Tensor(ws), Tensor(Shape{1, ws.n, 1, 1})};
  for (Index n = 0; n < xs.n; ++n)
    for (Index co = 0; co < ws.n; ++co)
      for (Index oy = 0; oy < gs.h; ++oy)
        for (Index ox = 0; ox < gs.w; ++ox) {
          const double gv = g(n, co, oy, ox);
          r.bias[co] += gv;
          const Index grp = co / cout_g;
          for (Index ci = 0; ci < cin_g; ++ci)
            for (Index ky = 0; ky < ws.h; ++ky)
              for (Index kx = 0; kx < ws.w; ++kx) {
                const Index iy = oy * o.stride_h - o.pad_h + ky;
                const Index ix = ox * o.stride_w - o.pad_w + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                r.input(n, grp * cin_g + ci, iy, ix) += gv * w(co, ci, ky, kx);
                r.weight(co, ci, ky, kx) += gv * x(n, grp * cin_g + ci, iy, ix);
              }
        }
  return r;
}

/// (1, M, K, 1) x (1, K, P, 1) triple loop.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Index m = a.shape().c, k = a.shape().h, p = b.shape().h;
  Tensor out(Shape{1, m, p, 1});
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < p; ++j) {
      double acc = 0.0;
      for (Index t = 0; t < k; ++t) acc += a(0, i, t, 0) * b(0, t, j, 0);
      out(0, i, j, 0) = acc;
    }
  return out;
}

/// Elementwise op under numpy-style broadcasting of unit axes.
inline Tensor broadcast(const Tensor& a, const Tensor& b, const std::function<double(double, double)>& op) {
  const Shape sa = a.shape(), sb = b.shape();
  Shape so;
  for (int ax = 0; ax < 4; ++ax) so[ax] = std::max(sa[ax], sb[ax]);
  Tensor out(so);
  for (Index n = 0; n < so.n; ++n)
    for (Index c = 0; c < so.c; ++c)
      for (Index h = 0; h < so.h; ++h)
        for (Index w = 0; w < so.w; ++w) {
          const double va = a(sa.n == 1 ? 0 : n, sa.c == 1 ? 0 : c, sa.h == 1 ? 0 : h, sa.w == 1 ? 0 : w);
          const double vb = b(sb.n == 1 ? 0 : n, sb.c == 1 ? 0 : c, sb.h == 1 ? 0 : h, sb.w == 1 ? 0 : w);
          out(n, c, h, w) = op(va, vb);
        }
  return out;
}

struct ConvCase {
  std::string kind;
  Tensor x, w, bias;
  Conv2dOptions opt;
};

/// Case i of a fixed rotation through general, strided, grouped, depthwise,
/// 1x11 / 11x1 strip and 1x1 configurations.
inline ConvCase conv_case(int i, cgr::Rng& rng) {
  const Index n = rng.uniform_int(1, 2);
  const Index h = rng.uniform_int(5, 13), w = rng.uniform_int(5, 13);
  ConvCase c;
  switch (i % 7) {
    case 0: {
      const Index cin = rng.uniform_int(1, 5), cout = rng.uniform_int(1, 6), k = 2 * rng.uniform_int(0, 2) + 1;
      c = {"general", random_tensor(Shape{n, cin, h, w}, rng), random_tensor(Shape{cout, cin, k, k}, rng), {},
           Conv2dOptions::same(k, k)};
      break;
    }
    case 1: {
      const Index cin = rng.uniform_int(1, 4), cout = rng.uniform_int(1, 5), k = 3;
      c = {"strided", random_tensor(Shape{n, cin, h, w}, rng), random_tensor(Shape{cout, cin, k, k}, rng), {},
           Conv2dOptions::strided(k, 2)};
      break;
    }
    case 2: {
      const Index g = 2, cin = 2 * rng.uniform_int(1, 3), cout = 2 * rng.uniform_int(1, 3);
      c = {"grouped", random_tensor(Shape{n, cin, h, w}, rng), random_tensor(Shape{cout, cin / g, 3, 3}, rng), {},
           Conv2dOptions::same(3, 3, g)};
      break;
    }
    case 3: {
      const Index ch = rng.uniform_int(1, 6), k = 2 * rng.uniform_int(1, 2) + 1;
      c = {"depthwise", random_tensor(Shape{n, ch, h, w}, rng), random_tensor(Shape{ch, 1, k, k}, rng), {},
           Conv2dOptions::same(k, k, ch)};
      break;
    }
    case 4: {
      const Index ch = rng.uniform_int(1, 6);
      c = {"strip1x11", random_tensor(Shape{n, ch, h, w}, rng), random_tensor(Shape{ch, 1, 1, 11}, rng), {},
           Conv2dOptions::same(1, 11, ch)};
      break;
    }
    case 5: {
      const Index ch = rng.uniform_int(1, 6);
      c = {"strip11x1", random_tensor(Shape{n, ch, h, w}, rng), random_tensor(Shape{ch, 1, 11, 1}, rng), {},
           Conv2dOptions::same(11, 1, ch)};
      break;
    }
    default: {
      const Index cin = rng.uniform_int(1, 8), cout = rng.uniform_int(1, 8);
      c = {"pointwise", random_tensor(Shape{n, cin, h, w}, rng), random_tensor(Shape{cout, cin, 1, 1}, rng), {},
           Conv2dOptions{}};
      break;
    }
  }
  c.bias = random_tensor(Shape{1, c.w.shape().n, 1, 1}, rng);
  return c;
}

/// Central-difference gradient of a scalar function of `param`, all coordinates.
inline Tensor numeric_grad(const std::function<double()>& f, Tensor& param, double eps = 1e-5) {
  Tensor g(param.shape());
  for (Index i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + eps;
    const double up = f();
    param[i] = saved - eps;
    const double down = f();
    param[i] = saved;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

/// Largest elementwise |a - n| / max(|a|, |n|, floor).
inline double max_rel_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-8) {
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double d = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / d);
  }
  return worst;
}

/// Hand count of multiply-accumulates for the tiny configuration (channels
/// 8/16/24/32, 4 classes, strips of 11, 3x3 fusion, MLP ratio 4, two pyramid
/// RCMs, head width 16 with hidden 4) at a square input of side s.
inline std::int64_t tiny_closed_form(std::int64_t s) {
  using i64 = std::int64_t;
  const i64 k = 11, f = 3, r = 4, d = 16, dm = 4, classes = 4;
  auto sq = [](i64 v) { return v * v; };
  auto rcm = [&](i64 c, i64 side) { return sq(side) * c * (2 * k + f * f + 2 * r * c); };
  i64 m = 0;
  m += sq(s / 2) * 3 * 8 * 9 + sq(s / 4) * 8 * 8 * 9;
  m += sq(s / 8) * (8 * 16 + 16 * 16) * 9;
  m += sq(s / 16) * (16 * 24 + 24 * 24) * 9;
  m += sq(s / 32) * (24 * 32 + 32 * 32) * 9;
  m += 2 * rcm(16 + 24 + 32, s / 64);
  m += sq(s / 8) * 16 * 16 + sq(s / 16) * 16 * 24 + rcm(16, s / 8);
  m += sq(s / 16) * 24 * 24 + sq(s / 32) * 24 * 32 + rcm(24, s / 16);
  m += sq(s / 32) * 32 * 32 + rcm(32, s / 32);
  m += sq(s / 8) * (d * 16 + 3 * classes * d);
  m += classes * d + d * classes + dm * d + d * dm;
  return m;
}

}  // namespace oracle
