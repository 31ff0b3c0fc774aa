#pragma once

// Forward and backward kernels over BasicTensor. Everything here is a pure
// function of its arguments; the tape in autodiff.hpp wires these together.

#include "cgrseg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace cgr {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowMatrixMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstRowMatrixMap = Eigen::Map<const RowMatrix<S>>;

enum class NormMode { train, eval };

// ---------------------------------------------------------------------------
// Broadcasting elementwise arithmetic

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out;
  for (int axis = 0; axis < 4; ++axis) {
    const Index da = a[axis];
    const Index db = b[axis];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + a.str() + " with " + b.str());
    }
    out[axis] = da == 1 ? db : da;
  }
  return out;
}

namespace detail {

inline std::array<Index, 4> broadcast_strides(const Shape& s) {
  // Strides of `s` with 0 on unit axes so they repeat under broadcasting.
  std::array<Index, 4> st{s.c * s.h * s.w, s.h * s.w, s.w, 1};
  for (int axis = 0; axis < 4; ++axis) {
    if (s[axis] == 1) st[axis] = 0;
  }
  return st;
}

template <typename S, typename Op>
BasicTensor<S> broadcast_apply(const BasicTensor<S>& a, const BasicTensor<S>& b, Op op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  BasicTensor<S> out(out_shape);
  if (a.shape() == b.shape()) {
    auto& o = out.data();
    const auto& x = a.data();
    const auto& y = b.data();
    for (Index i = 0; i < o.size(); ++i) o[i] = op(x[i], y[i]);
    return out;
  }
  const auto sa = broadcast_strides(a.shape());
  const auto sb = broadcast_strides(b.shape());
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.ptr();
  for (Index n = 0; n < out_shape.n; ++n) {
    for (Index c = 0; c < out_shape.c; ++c) {
      for (Index h = 0; h < out_shape.h; ++h) {
        const Index ia = n * sa[0] + c * sa[1] + h * sa[2];
        const Index ib = n * sb[0] + c * sb[1] + h * sb[2];
        for (Index w = 0; w < out_shape.w; ++w) {
          *po++ = op(pa[ia + w * sa[3]], pb[ib + w * sb[3]]);
        }
      }
    }
  }
  return out;
}

}  // namespace detail

template <typename S>
BasicTensor<S> add_broadcast(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  auto out = detail::broadcast_apply(a, b, [](S x, S y) { return x + y; });
  check_finite(out, "add_broadcast");
  return out;
}

template <typename S>
BasicTensor<S> mul_hadamard(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  auto out = detail::broadcast_apply(a, b, [](S x, S y) { return x * y; });
  check_finite(out, "mul_hadamard");
  return out;
}

/// Sums `g` over the axes on which `target` has extent 1 (adjoint of
/// broadcasting `target` up to g's shape).
template <typename S>
BasicTensor<S> sum_to_shape(const BasicTensor<S>& g, const Shape& target) {
  if (g.shape() == target) return g.reshaped(target);
  if (broadcast_shape(g.shape(), target) != g.shape()) {
    throw ShapeError("cannot reduce " + g.shape().str() + " to " + target.str());
  }
  BasicTensor<S> out(target);
  const auto st = detail::broadcast_strides(target);
  const Shape& gs = g.shape();
  const S* pg = g.ptr();
  S* po = out.ptr();
  for (Index n = 0; n < gs.n; ++n)
    for (Index c = 0; c < gs.c; ++c)
      for (Index h = 0; h < gs.h; ++h) {
        const Index base = n * st[0] + c * st[1] + h * st[2];
        for (Index w = 0; w < gs.w; ++w) po[base + w * st[3]] += *pg++;
      }
  return out;
}

template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& x, S factor) {
  return BasicTensor<S>(x.shape(), x.data() * factor);
}

// ---------------------------------------------------------------------------
// Matrix products on (1, M, K, 1) tensors

inline void require_matrix(const Shape& s, const char* what) {
  if (s.n != 1 || s.w != 1) {
    throw ShapeError(std::string(what) + " must be a (1, M, K, 1) matrix, got " + s.str());
  }
}

template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_matrix(a.shape(), "matmul lhs");
  require_matrix(b.shape(), "matmul rhs");
  const Index m = a.shape().c;
  const Index k = a.shape().h;
  const Index p = b.shape().h;
  if (b.shape().c != k) {
    throw ShapeError("matmul inner dimension mismatch: " + a.shape().str() + " x " + b.shape().str());
  }
  BasicTensor<S> out(Shape{1, m, p, 1});
  RowMatrixMap<S>(out.ptr(), m, p).noalias() =
      ConstRowMatrixMap<S>(a.ptr(), m, k) * ConstRowMatrixMap<S>(b.ptr(), k, p);
  check_finite(out, "matmul");
  return out;
}

template <typename S>
BasicTensor<S> transpose2d(const BasicTensor<S>& a) {
  require_matrix(a.shape(), "transpose2d input");
  const Index m = a.shape().c;
  const Index k = a.shape().h;
  BasicTensor<S> out(Shape{1, k, m, 1});
  RowMatrixMap<S>(out.ptr(), k, m) = ConstRowMatrixMap<S>(a.ptr(), m, k).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation)

struct Conv2dOptions {
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_h = 0;
  Index pad_w = 0;
  Index groups = 1;

  /// Stride 1 with (k-1)/2 padding per axis; exact for odd kernels.
  static Conv2dOptions same(Index kh, Index kw, Index groups = 1) {
    return Conv2dOptions{1, 1, (kh - 1) / 2, (kw - 1) / 2, groups};
  }
  static Conv2dOptions strided(Index k, Index stride, Index groups = 1) {
    return Conv2dOptions{stride, stride, (k - 1) / 2, (k - 1) / 2, groups};
  }
};

/// Validates operands and returns the output extent.
inline Shape conv2d_output_shape(const Shape& x, const Shape& w, const Conv2dOptions& opt) {
  if (opt.groups < 1 || opt.stride_h < 1 || opt.stride_w < 1 || opt.pad_h < 0 || opt.pad_w < 0) {
    throw ShapeError("invalid conv2d options");
  }
  if (x.c % opt.groups != 0 || w.n % opt.groups != 0) {
    throw ShapeError("conv2d channels " + std::to_string(x.c) + "->" + std::to_string(w.n) +
                     " not divisible by groups " + std::to_string(opt.groups));
  }
  if (w.c != x.c / opt.groups) {
    throw ShapeError("conv2d weight " + w.str() + " does not match input " + x.str() +
                     " with groups " + std::to_string(opt.groups));
  }
  const Index hn = x.h + 2 * opt.pad_h - w.h;
  const Index wn = x.w + 2 * opt.pad_w - w.w;
  if (hn < 0 || wn < 0) {
    throw ShapeError("conv2d output dims non-positive for input " + x.str() + ", kernel " + w.str());
  }
  return Shape{x.n, w.n, hn / opt.stride_h + 1, wn / opt.stride_w + 1};
}

inline bool is_depthwise(const Shape& x, const Shape& w, const Conv2dOptions& opt) {
  return opt.groups == x.c && w.n == x.c && w.c == 1;
}

namespace detail {

// Unfolds one group of one sample into a (cin_g*kh*kw, ho*wo) row-major matrix.
template <typename S>
void im2col(const S* x, Index cin, Index h, Index w, Index kh, Index kw, const Conv2dOptions& opt,
            Index ho, Index wo, S* cols) {
  for (Index c = 0; c < cin; ++c) {
    const S* plane = x + c * h * w;
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        S* row = cols + ((c * kh + i) * kw + j) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * opt.stride_h - opt.pad_h + i;
          if (ih < 0 || ih >= h) {
            std::fill(row + oh * wo, row + (oh + 1) * wo, S(0));
            continue;
          }
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * opt.stride_w - opt.pad_w + j;
            row[oh * wo + ow] = (iw >= 0 && iw < w) ? plane[ih * w + iw] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, Index cin, Index h, Index w, Index kh, Index kw,
                const Conv2dOptions& opt, Index ho, Index wo, S* x) {
  for (Index c = 0; c < cin; ++c) {
    S* plane = x + c * h * w;
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const S* row = cols + ((c * kh + i) * kw + j) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * opt.stride_h - opt.pad_h + i;
          if (ih < 0 || ih >= h) continue;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * opt.stride_w - opt.pad_w + j;
            if (iw >= 0 && iw < w) plane[ih * w + iw] += row[oh * wo + ow];
          }
        }
      }
    }
  }
}

// Range of kernel taps i with 0 <= o*stride - pad + i < extent.
inline std::pair<Index, Index> valid_taps(Index o, Index stride, Index pad, Index k, Index extent) {
  const Index start = o * stride - pad;
  return {std::max<Index>(0, -start), std::min<Index>(k, extent - start)};
}

template <typename S>
void depthwise_forward(const BasicTensor<S>& x, const BasicTensor<S>& wt, const Conv2dOptions& opt,
                       BasicTensor<S>& out) {
  const Shape& xs = x.shape();
  const Shape& os = out.shape();
  const Index kh = wt.shape().h;
  const Index kw = wt.shape().w;
  for (Index n = 0; n < xs.n; ++n) {
    for (Index c = 0; c < xs.c; ++c) {
      const S* in = x.plane(n, c);
      const S* k = wt.plane(c, 0);
      S* o = out.plane(n, c);
      for (Index oh = 0; oh < os.h; ++oh) {
        const auto [i0, i1] = valid_taps(oh, opt.stride_h, opt.pad_h, kh, xs.h);
        const Index hb = oh * opt.stride_h - opt.pad_h;
        for (Index ow = 0; ow < os.w; ++ow) {
          const auto [j0, j1] = valid_taps(ow, opt.stride_w, opt.pad_w, kw, xs.w);
          const Index wb = ow * opt.stride_w - opt.pad_w;
          S acc = 0;
          for (Index i = i0; i < i1; ++i) {
            const S* row = in + (hb + i) * xs.w + wb;
            const S* krow = k + i * kw;
            for (Index j = j0; j < j1; ++j) acc += krow[j] * row[j];
          }
          o[oh * os.w + ow] = acc;
        }
      }
    }
  }
}

template <typename S>
void depthwise_backward(const BasicTensor<S>& x, const BasicTensor<S>& wt, const BasicTensor<S>& g,
                        const Conv2dOptions& opt, BasicTensor<S>& gx, BasicTensor<S>& gw) {
  const Shape& xs = x.shape();
  const Shape& os = g.shape();
  const Index kh = wt.shape().h;
  const Index kw = wt.shape().w;
  for (Index n = 0; n < xs.n; ++n) {
    for (Index c = 0; c < xs.c; ++c) {
      const S* in = x.plane(n, c);
      const S* k = wt.plane(c, 0);
      const S* go = g.plane(n, c);
      S* gi = gx.plane(n, c);
      S* gk = gw.plane(c, 0);
      for (Index oh = 0; oh < os.h; ++oh) {
        const auto [i0, i1] = valid_taps(oh, opt.stride_h, opt.pad_h, kh, xs.h);
        const Index hb = oh * opt.stride_h - opt.pad_h;
        for (Index ow = 0; ow < os.w; ++ow) {
          const auto [j0, j1] = valid_taps(ow, opt.stride_w, opt.pad_w, kw, xs.w);
          const Index wb = ow * opt.stride_w - opt.pad_w;
          const S gv = go[oh * os.w + ow];
          if (gv == S(0)) continue;
          for (Index i = i0; i < i1; ++i) {
            const Index base = (hb + i) * xs.w + wb;
            for (Index j = j0; j < j1; ++j) {
              gi[base + j] += k[i * kw + j] * gv;
              gk[i * kw + j] += in[base + j] * gv;
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Grouped 2-D cross-correlation. `w` is (Cout, Cin/groups, kh, kw); `bias`,
/// when non-null, holds Cout values.
template <typename S>
BasicTensor<S> conv2d(const BasicTensor<S>& x, const BasicTensor<S>& w, const BasicTensor<S>* bias,
                      const Conv2dOptions& opt) {
  const Shape os = conv2d_output_shape(x.shape(), w.shape(), opt);
  if (bias && bias->size() != os.c) throw ShapeError("conv2d bias length does not match Cout");
  BasicTensor<S> out(os);
  const Shape& xs = x.shape();
  const Index kh = w.shape().h;
  const Index kw = w.shape().w;
  if (is_depthwise(xs, w.shape(), opt)) {
    detail::depthwise_forward(x, w, opt, out);
  } else {
    const Index cin_g = xs.c / opt.groups;
    const Index cout_g = os.c / opt.groups;
    const Index rows = cin_g * kh * kw;
    const Index cols_n = os.h * os.w;
    const bool pointwise = kh == 1 && kw == 1 && opt.stride_h == 1 && opt.stride_w == 1 &&
                           opt.pad_h == 0 && opt.pad_w == 0;
    std::vector<S> cols(pointwise ? 0 : static_cast<std::size_t>(rows * cols_n));
    for (Index n = 0; n < xs.n; ++n) {
      for (Index g = 0; g < opt.groups; ++g) {
        const S* xin = x.plane(n, g * cin_g);
        const S* colp = xin;
        if (!pointwise) {
          detail::im2col(xin, cin_g, xs.h, xs.w, kh, kw, opt, os.h, os.w, cols.data());
          colp = cols.data();
        }
        RowMatrixMap<S>(out.plane(n, g * cout_g), cout_g, cols_n).noalias() =
            ConstRowMatrixMap<S>(w.plane(g * cout_g, 0), cout_g, rows) *
            ConstRowMatrixMap<S>(colp, rows, cols_n);
      }
    }
  }
  if (bias) {
    const Index plane = os.h * os.w;
    for (Index n = 0; n < os.n; ++n)
      for (Index c = 0; c < os.c; ++c) {
        S* o = out.plane(n, c);
        const S b = (*bias)[c];
        for (Index i = 0; i < plane; ++i) o[i] += b;
      }
  }
  check_finite(out, "conv2d");
  return out;
}

template <typename S>
struct Conv2dGrads {
  BasicTensor<S> input;
  BasicTensor<S> weight;
  BasicTensor<S> bias;  // empty when the forward had no bias
};

template <typename S>
Conv2dGrads<S> conv2d_backward(const BasicTensor<S>& x, const BasicTensor<S>& w, bool has_bias,
                               const BasicTensor<S>& g, const Conv2dOptions& opt) {
  const Shape os = conv2d_output_shape(x.shape(), w.shape(), opt);
  if (g.shape() != os) throw ShapeError("conv2d_backward gradient shape mismatch");
  Conv2dGrads<S> grads{BasicTensor<S>(x.shape()), BasicTensor<S>(w.shape()), {}};
  const Shape& xs = x.shape();
  const Index kh = w.shape().h;
  const Index kw = w.shape().w;
  if (is_depthwise(xs, w.shape(), opt)) {
    detail::depthwise_backward(x, w, g, opt, grads.input, grads.weight);
  } else {
    const Index cin_g = xs.c / opt.groups;
    const Index cout_g = os.c / opt.groups;
    const Index rows = cin_g * kh * kw;
    const Index cols_n = os.h * os.w;
    std::vector<S> cols(static_cast<std::size_t>(rows * cols_n));
    std::vector<S> gcols(static_cast<std::size_t>(rows * cols_n));
    for (Index n = 0; n < xs.n; ++n) {
      for (Index gi = 0; gi < opt.groups; ++gi) {
        detail::im2col(x.plane(n, gi * cin_g), cin_g, xs.h, xs.w, kh, kw, opt, os.h, os.w,
                       cols.data());
        ConstRowMatrixMap<S> go(g.plane(n, gi * cout_g), cout_g, cols_n);
        ConstRowMatrixMap<S> colm(cols.data(), rows, cols_n);
        RowMatrixMap<S>(grads.weight.plane(gi * cout_g, 0), cout_g, rows).noalias() +=
            go * colm.transpose();
        RowMatrixMap<S>(gcols.data(), rows, cols_n).noalias() =
            ConstRowMatrixMap<S>(w.plane(gi * cout_g, 0), cout_g, rows).transpose() * go;
        detail::col2im_add(gcols.data(), cin_g, xs.h, xs.w, kh, kw, opt, os.h, os.w,
                           grads.input.plane(n, gi * cin_g));
      }
    }
  }
  if (has_bias) {
    grads.bias = BasicTensor<S>(Shape{1, os.c, 1, 1});
    const Index plane = os.h * os.w;
    for (Index n = 0; n < os.n; ++n)
      for (Index c = 0; c < os.c; ++c) {
        const S* gp = g.plane(n, c);
        S acc = 0;
        for (Index i = 0; i < plane; ++i) acc += gp[i];
        grads.bias[c] += acc;
      }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Pooling

template <typename S>
BasicTensor<S> avg_pool2d(const BasicTensor<S>& x, Index factor) {
  const Shape& s = x.shape();
  if (factor < 1) throw ShapeError("avg_pool2d factor must be positive");
  if (s.h % factor != 0 || s.w % factor != 0) {
    throw ShapeError("avg_pool2d: spatial dims " + s.str() + " not divisible by " +
                     std::to_string(factor));
  }
  const Index ho = s.h / factor;
  const Index wo = s.w / factor;
  BasicTensor<S> out(Shape{s.n, s.c, ho, wo});
  const S inv = S(1) / S(factor * factor);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const S* in = x.plane(n, c);
      S* o = out.plane(n, c);
      for (Index oh = 0; oh < ho; ++oh)
        for (Index ow = 0; ow < wo; ++ow) {
          S acc = 0;
          for (Index i = 0; i < factor; ++i)
            for (Index j = 0; j < factor; ++j) acc += in[(oh * factor + i) * s.w + ow * factor + j];
          o[oh * wo + ow] = acc * inv;
        }
    }
  return out;
}

template <typename S>
BasicTensor<S> avg_pool2d_backward(const BasicTensor<S>& g, const Shape& input, Index factor) {
  BasicTensor<S> gx(input);
  const Index wo = g.shape().w;
  const S inv = S(1) / S(factor * factor);
  for (Index n = 0; n < input.n; ++n)
    for (Index c = 0; c < input.c; ++c) {
      const S* go = g.plane(n, c);
      S* gi = gx.plane(n, c);
      for (Index h = 0; h < input.h; ++h)
        for (Index w = 0; w < input.w; ++w) gi[h * input.w + w] = go[(h / factor) * wo + w / factor] * inv;
    }
  return gx;
}

/// Mean over W: (N,C,H,W) -> (N,C,H,1).
template <typename S>
BasicTensor<S> pool_rows(const BasicTensor<S>& x) {
  const Shape& s = x.shape();
  if (s.size() == 0) throw ShapeError("pool_rows of an empty tensor");
  BasicTensor<S> out(Shape{s.n, s.c, s.h, 1});
  RowMatrixMap<S>(out.ptr(), s.n * s.c * s.h, 1) =
      ConstRowMatrixMap<S>(x.ptr(), s.n * s.c * s.h, s.w).rowwise().mean();
  return out;
}

/// Mean over H: (N,C,H,W) -> (N,C,1,W).
template <typename S>
BasicTensor<S> pool_cols(const BasicTensor<S>& x) {
  const Shape& s = x.shape();
  if (s.size() == 0) throw ShapeError("pool_cols of an empty tensor");
  BasicTensor<S> out(Shape{s.n, s.c, 1, s.w});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(out.plane(n, c), s.w) =
          ConstRowMatrixMap<S>(x.plane(n, c), s.h, s.w).colwise().mean();
    }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

template <typename S>
struct NormCache {
  BasicTensor<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std;  // per normalized group
};

/// Per-channel normalization over (N, H, W). gamma/beta/running stats hold C
/// values each. In train mode the running statistics are updated in place
/// (unbiased variance) with weight `momentum` on the new batch.
template <typename S>
BasicTensor<S> batch_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                          const BasicTensor<S>& beta, BasicTensor<S>& running_mean,
                          BasicTensor<S>& running_var, NormMode mode, S momentum, S eps,
                          NormCache<S>* cache = nullptr) {
  const Shape& s = x.shape();
  if (!(eps > S(0))) throw ShapeError("batch_norm eps must be positive");
  if (gamma.size() != s.c || beta.size() != s.c || running_mean.size() != s.c ||
      running_var.size() != s.c) {
    throw ShapeError("batch_norm parameter length does not match channels of " + s.str());
  }
  const Index plane = s.h * s.w;
  const Index count = s.n * plane;
  BasicTensor<S> out(s);
  NormCache<S> local;
  NormCache<S>& nc = cache ? *cache : local;
  nc.xhat = BasicTensor<S>(s);
  nc.inv_std.resize(s.c);
  for (Index c = 0; c < s.c; ++c) {
    S mean;
    S var;
    if (mode == NormMode::train) {
      S sum = 0;
      for (Index n = 0; n < s.n; ++n) {
        const S* p = x.plane(n, c);
        for (Index i = 0; i < plane; ++i) sum += p[i];
      }
      mean = sum / S(count);
      S sq = 0;
      for (Index n = 0; n < s.n; ++n) {
        const S* p = x.plane(n, c);
        for (Index i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / S(count);
      const S unbiased = count > 1 ? sq / S(count - 1) : var;
      running_mean[c] = (S(1) - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (S(1) - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const S inv = S(1) / std::sqrt(var + eps);
    nc.inv_std[c] = inv;
    for (Index n = 0; n < s.n; ++n) {
      const S* p = x.plane(n, c);
      S* xh = nc.xhat.plane(n, c);
      S* o = out.plane(n, c);
      for (Index i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean) * inv;
        o[i] = gamma[c] * xh[i] + beta[c];
      }
    }
  }
  check_finite(out, "batch_norm");
  return out;
}

template <typename S>
struct NormGrads {
  BasicTensor<S> input;
  BasicTensor<S> gamma;
  BasicTensor<S> beta;
};

template <typename S>
NormGrads<S> batch_norm_backward(const BasicTensor<S>& g, const BasicTensor<S>& gamma,
                                 const NormCache<S>& cache, NormMode mode) {
  const Shape& s = g.shape();
  const Index plane = s.h * s.w;
  const S count = S(s.n * plane);
  NormGrads<S> out{BasicTensor<S>(s), BasicTensor<S>(gamma.shape()), BasicTensor<S>(gamma.shape())};
  for (Index c = 0; c < s.c; ++c) {
    S sum_g = 0;
    S sum_gx = 0;
    for (Index n = 0; n < s.n; ++n) {
      const S* gp = g.plane(n, c);
      const S* xh = cache.xhat.plane(n, c);
      for (Index i = 0; i < plane; ++i) {
        sum_g += gp[i];
        sum_gx += gp[i] * xh[i];
      }
    }
    out.beta[c] = sum_g;
    out.gamma[c] = sum_gx;
    const S k = gamma[c] * cache.inv_std[c];
    for (Index n = 0; n < s.n; ++n) {
      const S* gp = g.plane(n, c);
      const S* xh = cache.xhat.plane(n, c);
      S* gi = out.input.plane(n, c);
      if (mode == NormMode::train) {
        for (Index i = 0; i < plane; ++i) {
          gi[i] = k * (gp[i] - sum_g / count - xh[i] * sum_gx / count);
        }
      } else {
        for (Index i = 0; i < plane; ++i) gi[i] = k * gp[i];
      }
    }
  }
  return out;
}

/// Normalizes over the channel axis independently at every (n, h, w).
template <typename S>
BasicTensor<S> layer_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                          const BasicTensor<S>& beta, S eps, NormCache<S>* cache = nullptr) {
  const Shape& s = x.shape();
  if (!(eps > S(0))) throw ShapeError("layer_norm eps must be positive");
  if (gamma.size() != s.c || beta.size() != s.c) {
    throw ShapeError("layer_norm parameter length does not match channels of " + s.str());
  }
  const Index plane = s.h * s.w;
  BasicTensor<S> out(s);
  NormCache<S> local;
  NormCache<S>& nc = cache ? *cache : local;
  nc.xhat = BasicTensor<S>(s);
  nc.inv_std.resize(s.n * plane);
  for (Index n = 0; n < s.n; ++n)
    for (Index i = 0; i < plane; ++i) {
      S mean = 0;
      for (Index c = 0; c < s.c; ++c) mean += x.plane(n, c)[i];
      mean /= S(s.c);
      S var = 0;
      for (Index c = 0; c < s.c; ++c) {
        const S d = x.plane(n, c)[i] - mean;
        var += d * d;
      }
      var /= S(s.c);
      const S inv = S(1) / std::sqrt(var + eps);
      nc.inv_std[n * plane + i] = inv;
      for (Index c = 0; c < s.c; ++c) {
        const S xh = (x.plane(n, c)[i] - mean) * inv;
        nc.xhat.plane(n, c)[i] = xh;
        out.plane(n, c)[i] = gamma[c] * xh + beta[c];
      }
    }
  check_finite(out, "layer_norm");
  return out;
}

template <typename S>
NormGrads<S> layer_norm_backward(const BasicTensor<S>& g, const BasicTensor<S>& gamma,
                                 const NormCache<S>& cache) {
  const Shape& s = g.shape();
  const Index plane = s.h * s.w;
  NormGrads<S> out{BasicTensor<S>(s), BasicTensor<S>(gamma.shape()), BasicTensor<S>(gamma.shape())};
  for (Index n = 0; n < s.n; ++n)
    for (Index i = 0; i < plane; ++i) {
      S sum_d = 0;
      S sum_dx = 0;
      for (Index c = 0; c < s.c; ++c) {
        const S gv = g.plane(n, c)[i];
        const S xh = cache.xhat.plane(n, c)[i];
        out.gamma[c] += gv * xh;
        out.beta[c] += gv;
        const S d = gv * gamma[c];
        sum_d += d;
        sum_dx += d * xh;
      }
      const S inv = cache.inv_std[n * plane + i];
      const S cnt = S(s.c);
      for (Index c = 0; c < s.c; ++c) {
        const S d = g.plane(n, c)[i] * gamma[c];
        const S xh = cache.xhat.plane(n, c)[i];
        out.input.plane(n, c)[i] = inv * (d - sum_d / cnt - xh * sum_dx / cnt);
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& x) {
  return BasicTensor<S>(x.shape(), x.data().cwiseMax(S(0)));
}

template <typename S>
BasicTensor<S> relu_backward(const BasicTensor<S>& x, const BasicTensor<S>& g) {
  BasicTensor<S> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = x[i] > S(0) ? g[i] : S(0);
  return out;
}

template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& x) {
  BasicTensor<S> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const S v = x[i];
    // Branches keep exp() from overflowing for large |v|.
    if (v >= S(0)) {
      out[i] = S(1) / (S(1) + std::exp(-v));
    } else {
      const S e = std::exp(v);
      out[i] = e / (S(1) + e);
    }
  }
  check_finite(out, "sigmoid");
  return out;
}

template <typename S>
BasicTensor<S> sigmoid_backward(const BasicTensor<S>& y, const BasicTensor<S>& g) {
  return BasicTensor<S>(y.shape(), (g.data().array() * y.data().array() * (S(1) - y.data().array())).matrix());
}

namespace detail {
// Visits each 1-D fiber along `axis` as (base offset, stride, length).
template <typename F>
void for_each_fiber(const Shape& s, int axis, F&& f) {
  if (axis < 0 || axis > 3) throw ShapeError("axis out of range: " + std::to_string(axis));
  const std::array<Index, 4> strides{s.c * s.h * s.w, s.h * s.w, s.w, 1};
  std::array<Index, 4> ext{s.n, s.c, s.h, s.w};
  const Index len = ext[axis];
  ext[axis] = 1;
  for (Index a = 0; a < ext[0]; ++a)
    for (Index b = 0; b < ext[1]; ++b)
      for (Index c = 0; c < ext[2]; ++c)
        for (Index d = 0; d < ext[3]; ++d) {
          f(a * strides[0] + b * strides[1] + c * strides[2] + d * strides[3], strides[axis], len);
        }
}
}  // namespace detail

template <typename S>
BasicTensor<S> softmax(const BasicTensor<S>& x, int axis) {
  BasicTensor<S> out(x.shape());
  detail::for_each_fiber(x.shape(), axis, [&](Index base, Index stride, Index len) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Index i = 0; i < len; ++i) mx = std::max(mx, x[base + i * stride]);
    S sum = 0;
    for (Index i = 0; i < len; ++i) {
      const S e = std::exp(x[base + i * stride] - mx);
      out[base + i * stride] = e;
      sum += e;
    }
    for (Index i = 0; i < len; ++i) out[base + i * stride] /= sum;
  });
  check_finite(out, "softmax");
  return out;
}

template <typename S>
BasicTensor<S> softmax_backward(const BasicTensor<S>& y, const BasicTensor<S>& g, int axis) {
  BasicTensor<S> out(y.shape());
  detail::for_each_fiber(y.shape(), axis, [&](Index base, Index stride, Index len) {
    S dot = 0;
    for (Index i = 0; i < len; ++i) dot += g[base + i * stride] * y[base + i * stride];
    for (Index i = 0; i < len; ++i) {
      const Index k = base + i * stride;
      out[k] = y[k] * (g[k] - dot);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {
struct LinearTap {
  Index lo;
  Index hi;
  double frac;  // weight of `hi`
};

// Half-pixel (align_corners=false) source taps for resizing `in` samples to `out`.
inline std::vector<LinearTap> bilinear_taps(Index in, Index out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}
}  // namespace detail

template <typename S>
BasicTensor<S> upsample_bilinear(const BasicTensor<S>& x, Index out_h, Index out_w) {
  const Shape& s = x.shape();
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample_bilinear output dims must be positive");
  if (s.h == out_h && s.w == out_w) return x.reshaped(s);
  const auto th = detail::bilinear_taps(s.h, out_h);
  const auto tw = detail::bilinear_taps(s.w, out_w);
  BasicTensor<S> out(Shape{s.n, s.c, out_h, out_w});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const S* in = x.plane(n, c);
      S* o = out.plane(n, c);
      for (Index i = 0; i < out_h; ++i) {
        const auto& a = th[static_cast<std::size_t>(i)];
        const S* r0 = in + a.lo * s.w;
        const S* r1 = in + a.hi * s.w;
        const S fa = S(a.frac);
        for (Index j = 0; j < out_w; ++j) {
          const auto& b = tw[static_cast<std::size_t>(j)];
          const S fb = S(b.frac);
          const S top = r0[b.lo] * (S(1) - fb) + r0[b.hi] * fb;
          const S bot = r1[b.lo] * (S(1) - fb) + r1[b.hi] * fb;
          o[i * out_w + j] = top * (S(1) - fa) + bot * fa;
        }
      }
    }
  return out;
}

template <typename S>
BasicTensor<S> upsample_bilinear_backward(const BasicTensor<S>& g, const Shape& input) {
  const Index out_h = g.shape().h;
  const Index out_w = g.shape().w;
  if (input.h == out_h && input.w == out_w) return g.reshaped(input);
  const auto th = detail::bilinear_taps(input.h, out_h);
  const auto tw = detail::bilinear_taps(input.w, out_w);
  BasicTensor<S> gx(input);
  for (Index n = 0; n < input.n; ++n)
    for (Index c = 0; c < input.c; ++c) {
      const S* go = g.plane(n, c);
      S* gi = gx.plane(n, c);
      for (Index i = 0; i < out_h; ++i) {
        const auto& a = th[static_cast<std::size_t>(i)];
        const S fa = S(a.frac);
        for (Index j = 0; j < out_w; ++j) {
          const auto& b = tw[static_cast<std::size_t>(j)];
          const S fb = S(b.frac);
          const S v = go[i * out_w + j];
          gi[a.lo * input.w + b.lo] += v * (S(1) - fa) * (S(1) - fb);
          gi[a.lo * input.w + b.hi] += v * (S(1) - fa) * fb;
          gi[a.hi * input.w + b.lo] += v * fa * (S(1) - fb);
          gi[a.hi * input.w + b.hi] += v * fa * fb;
        }
      }
    }
  return gx;
}

/// Mirror padding on the bottom and right edges (edge sample not repeated).
template <typename S>
BasicTensor<S> pad_reflect(const BasicTensor<S>& x, Index pad_bottom, Index pad_right) {
  const Shape& s = x.shape();
  if (pad_bottom < 0 || pad_right < 0) throw ShapeError("negative padding");
  auto reflect = [](Index i, Index n) {
    if (n == 1) return Index{0};
    const Index period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  BasicTensor<S> out(Shape{s.n, s.c, s.h + pad_bottom, s.w + pad_right});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const S* in = x.plane(n, c);
      S* o = out.plane(n, c);
      for (Index h = 0; h < out.shape().h; ++h)
        for (Index w = 0; w < out.shape().w; ++w) {
          o[h * out.shape().w + w] = in[reflect(h, s.h) * s.w + reflect(w, s.w)];
        }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Channel and batch slicing

template <typename S>
BasicTensor<S> concat_channels(std::span<const BasicTensor<S>> xs) {
  if (xs.empty()) throw ShapeError("concat_channels of an empty list");
  const Shape& first = xs[0].shape();
  Index channels = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels shape mismatch: " + first.str() + " vs " + s.str());
    }
    channels += s.c;
  }
  BasicTensor<S> out(Shape{first.n, channels, first.h, first.w});
  const Index plane = first.h * first.w;
  for (Index n = 0; n < first.n; ++n) {
    Index c0 = 0;
    for (const auto& x : xs) {
      const Index len = x.shape().c * plane;
      std::copy(x.plane(n, 0), x.plane(n, 0) + len, out.plane(n, c0));
      c0 += x.shape().c;
    }
  }
  return out;
}

template <typename S>
std::vector<BasicTensor<S>> split_channels(const BasicTensor<S>& x, std::span<const Index> sizes) {
  const Shape& s = x.shape();
  Index total = 0;
  for (Index k : sizes) {
    if (k < 0) throw ShapeError("split_channels: negative size");
    total += k;
  }
  if (total != s.c) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + ", tensor has " +
                     std::to_string(s.c) + " channels");
  }
  std::vector<BasicTensor<S>> parts;
  parts.reserve(sizes.size());
  const Index plane = s.h * s.w;
  Index c0 = 0;
  for (Index k : sizes) {
    BasicTensor<S> part(Shape{s.n, k, s.h, s.w});
    for (Index n = 0; n < s.n; ++n) {
      std::copy(x.plane(n, c0), x.plane(n, c0) + k * plane, part.plane(n, 0));
    }
    parts.push_back(std::move(part));
    c0 += k;
  }
  return parts;
}

template <typename S>
BasicTensor<S> select_batch(const BasicTensor<S>& x, Index n) {
  const Shape& s = x.shape();
  if (n < 0 || n >= s.n) throw ShapeError("select_batch index out of range");
  BasicTensor<S> out(Shape{1, s.c, s.h, s.w});
  const Index len = s.c * s.h * s.w;
  std::copy(x.ptr() + n * len, x.ptr() + (n + 1) * len, out.ptr());
  return out;
}

template <typename S>
BasicTensor<S> stack_batch(std::span<const BasicTensor<S>> xs) {
  if (xs.empty()) throw ShapeError("stack_batch of an empty list");
  const Shape& first = xs[0].shape();
  Index batch = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w) {
      throw ShapeError("stack_batch shape mismatch: " + first.str() + " vs " + s.str());
    }
    batch += s.n;
  }
  BasicTensor<S> out(Shape{batch, first.c, first.h, first.w});
  Index offset = 0;
  for (const auto& x : xs) {
    std::copy(x.ptr(), x.ptr() + x.size(), out.ptr() + offset);
    offset += x.size();
  }
  return out;
}

}  // namespace cgr
