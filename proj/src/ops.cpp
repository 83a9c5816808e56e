#include "sadkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <vector>

namespace sadkit {

namespace {

struct ImageDims {
  Index n, c, h, w;
};

ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + to_string(s));
}

Shape image_shape(const Shape& like, Index c, Index h, Index w) {
  if (like.size() == 3) return {c, h, w};
  return {like[0], c, h, w};
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Output indices o with 0 <= o*stride + offset < in.
struct TapRange {
  Index lo = 0, hi = 0;
};

TapRange tap_range(Index in, Index out, Index offset, Index stride) {
  TapRange r;
  r.lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  const Index last = in - 1 - offset;
  r.hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (r.hi < r.lo) r.hi = r.lo;
  return r;
}

template <typename Scalar>
using Strided = Eigen::Map<const ArrayX<Scalar>, 0, Eigen::InnerStride<>>;
template <typename Scalar>
using StridedMut = Eigen::Map<ArrayX<Scalar>, 0, Eigen::InnerStride<>>;

// y[0..len) += a * x[0, s, 2s, ...]
template <typename Scalar>
inline void axpy_gather(Index len, Scalar a, const Scalar* x, Index s, Scalar* y) {
  Eigen::Map<ArrayX<Scalar>> out(y, len);
  if (s == 1) {
    out += a * Eigen::Map<const ArrayX<Scalar>>(x, len);
  } else {
    out += a * Strided<Scalar>(x, len, Eigen::InnerStride<>(s));
  }
}

// y[0, s, 2s, ...] += a * x[0..len)
template <typename Scalar>
inline void axpy_scatter(Index len, Scalar a, const Scalar* x, Scalar* y, Index s) {
  Eigen::Map<const ArrayX<Scalar>> in(x, len);
  if (s == 1) {
    Eigen::Map<ArrayX<Scalar>>(y, len) += a * in;
  } else {
    StridedMut<Scalar>(y, len, Eigen::InnerStride<>(s)) += a * in;
  }
}

template <typename Scalar>
inline Scalar dot_strided(Index len, const Scalar* g, const Scalar* x, Index s) {
  Eigen::Map<const ArrayX<Scalar>> gv(g, len);
  if (s == 1) return (gv * Eigen::Map<const ArrayX<Scalar>>(x, len)).sum();
  return (gv * Strided<Scalar>(x, len, Eigen::InnerStride<>(s))).sum();
}

// Lowered patches for one image: column k = (ci, ky, kx) holds that tap for
// every output pixel, zero where the tap falls in the padding.
struct ConvGeom {
  Index c, h, w, kh, kw, ho, wo, s;
  std::vector<Index> yoff, xoff;
  std::vector<TapRange> yr, xr;
};

template <typename Scalar>
void im2col(const Scalar* ip, const ConvGeom& g, Scalar* cols) {
  const Index p = g.ho * g.wo;
  for (Index ci = 0; ci < g.c; ++ci) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        Scalar* col = cols + ((ci * g.kh + ky) * g.kw + kx) * p;
        Eigen::Map<ArrayX<Scalar>>(col, p).setZero();
        const Index len = g.xr[kx].hi - g.xr[kx].lo;
        if (len <= 0) continue;
        for (Index oy = g.yr[ky].lo; oy < g.yr[ky].hi; ++oy) {
          const Scalar* src = ip + (ci * g.h + oy * g.s + g.yoff[ky]) * g.w + g.xr[kx].lo * g.s + g.xoff[kx];
          axpy_gather(len, Scalar(1), src, g.s, col + oy * g.wo + g.xr[kx].lo);
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeom& g, Scalar* ip) {
  const Index p = g.ho * g.wo;
  for (Index ci = 0; ci < g.c; ++ci) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        const Scalar* col = cols + ((ci * g.kh + ky) * g.kw + kx) * p;
        const Index len = g.xr[kx].hi - g.xr[kx].lo;
        if (len <= 0) continue;
        for (Index oy = g.yr[ky].lo; oy < g.yr[ky].hi; ++oy) {
          Scalar* dst = ip + (ci * g.h + oy * g.s + g.yoff[ky]) * g.w + g.xr[kx].lo * g.s + g.xoff[kx];
          axpy_scatter(len, Scalar(1), col + oy * g.wo + g.xr[kx].lo, dst, g.s);
        }
      }
    }
  }
}

// Single precision runs through a lowered GEMM. Double keeps the direct
// loops so its summation order matches a plain nested-loop reference.
template <typename Scalar>
constexpr bool kLoweredConv = std::is_same_v<Scalar, float>;

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

struct ResampleAxis {
  std::vector<Index> i0, i1;
  std::vector<double> frac;
};

ResampleAxis resample_axis(Index in, Index out) {
  ResampleAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.frac.resize(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    a.i0[i] = lo;
    a.i1[i] = std::min(lo + 1, in - 1);
    a.frac[i] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace

Index conv_output_extent(Index in, Index kernel, const Conv2dOptions& opt) {
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0) {
    throw ShapeError("conv2d: stride and dilation must be positive and padding nonnegative");
  }
  const Index span = in + 2 * opt.padding - opt.dilation * (kernel - 1) - 1;
  if (span < 0 || span % opt.stride != 0) {
    throw ShapeError("conv2d: extent " + std::to_string(in) + " with kernel " + std::to_string(kernel) +
                     ", stride " + std::to_string(opt.stride) + ", padding " + std::to_string(opt.padding) +
                     ", dilation " + std::to_string(opt.dilation) + " does not give an integer output extent");
  }
  return span / opt.stride + 1;
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, const Conv2dOptions& opt) {
  const ImageDims d = image_dims(input.shape(), "conv2d");
  if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be [C_out,C_in,kh,kw], got " + to_string(kernel.shape()));
  const Index co_n = kernel.dim(0), ci_n = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (ci_n != d.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(ci_n) + " input channels, input " +
                     to_string(input.shape()) + " has " + std::to_string(d.c));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.size() != co_n)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(co_n) + "], got " + to_string(bias.shape()));
  }
  const Index ho = conv_output_extent(d.h, kh, opt);
  const Index wo = conv_output_extent(d.w, kw, opt);
  const Index s = opt.stride;

  std::vector<Index> yoff(kh), xoff(kw);
  std::vector<TapRange> yr(kh), xr(kw);
  for (Index k = 0; k < kh; ++k) {
    yoff[k] = k * opt.dilation - opt.padding;
    yr[k] = tap_range(d.h, ho, yoff[k], s);
  }
  for (Index k = 0; k < kw; ++k) {
    xoff[k] = k * opt.dilation - opt.padding;
    xr[k] = tap_range(d.w, wo, xoff[k], s);
  }

  auto geom = std::make_shared<ConvGeom>(ConvGeom{ci_n, d.h, d.w, kh, kw, ho, wo, s, yoff, xoff, yr, xr});
  const Scalar* in = input.data();
  const Scalar* ker = kernel.data();
  ArrayX<Scalar> out(d.n * co_n * ho * wo);
  if constexpr (kLoweredConv<Scalar>) {
    const Index kk = ci_n * kh * kw, p = ho * wo;
    MatX<Scalar> cols(p, kk);
    Eigen::Map<const MatX<Scalar>> wt(ker, kk, co_n);
    for (Index n = 0; n < d.n; ++n) {
      im2col(in + n * ci_n * d.h * d.w, *geom, cols.data());
      Eigen::Map<MatX<Scalar>> o(out.data() + n * co_n * p, p, co_n);
      o.noalias() = cols * wt;
      if (bias.defined()) o.rowwise() += bias.value().matrix().transpose();
    }
  } else {
    for (Index n = 0; n < d.n; ++n) {
      for (Index co = 0; co < co_n; ++co) {
        Scalar* op = out.data() + (n * co_n + co) * ho * wo;
        Eigen::Map<ArrayX<Scalar>>(op, ho * wo).setConstant(bias.defined() ? bias.value()[co] : Scalar(0));
        for (Index ci = 0; ci < ci_n; ++ci) {
          const Scalar* ip = in + (n * ci_n + ci) * d.h * d.w;
          for (Index ky = 0; ky < kh; ++ky) {
            for (Index kx = 0; kx < kw; ++kx) {
              const Index len = xr[kx].hi - xr[kx].lo;
              if (len <= 0) continue;
              const Scalar w = ker[((co * ci_n + ci) * kh + ky) * kw + kx];
              for (Index oy = yr[ky].lo; oy < yr[ky].hi; ++oy) {
                const Index iy = oy * s + yoff[ky];
                axpy_gather(len, w, ip + iy * d.w + xr[kx].lo * s + xoff[kx], s, op + oy * wo + xr[kx].lo);
              }
            }
          }
        }
      }
    }
  }

  Shape out_shape = image_shape(input.shape(), co_n, ho, wo);
  return make_op_result<Scalar>(
      std::move(out_shape), std::move(out), {input, kernel, bias},
      [input, kernel, bias, d, co_n, ci_n, kh, kw, ho, wo, s, yoff, xoff, yr, xr, geom](const ArrayX<Scalar>& g) {
        const bool want_in = input.requires_grad();
        const bool want_k = kernel.requires_grad();
        ArrayX<Scalar> gi, gk;
        if (want_in) gi = ArrayX<Scalar>::Zero(input.size());
        if (want_k) gk = ArrayX<Scalar>::Zero(kernel.size());
        const Scalar* in = input.data();
        const Scalar* ker = kernel.data();
        if constexpr (kLoweredConv<Scalar>) {
          const Index kk = ci_n * kh * kw, p = ho * wo;
          MatX<Scalar> cols(p, kk);
          Eigen::Map<const MatX<Scalar>> wt(ker, kk, co_n);
          for (Index n = 0; n < d.n && (want_in || want_k); ++n) {
            Eigen::Map<const MatX<Scalar>> go(g.data() + n * co_n * p, p, co_n);
            if (want_k) {
              im2col(in + n * ci_n * d.h * d.w, *geom, cols.data());
              Eigen::Map<MatX<Scalar>>(gk.data(), kk, co_n).noalias() += cols.transpose() * go;
            }
            if (want_in) {
              cols.noalias() = go * wt.transpose();
              col2im(cols.data(), *geom, gi.data() + n * ci_n * d.h * d.w);
            }
          }
        } else if (want_in || want_k) {
          for (Index n = 0; n < d.n; ++n) {
            for (Index co = 0; co < co_n; ++co) {
              const Scalar* gp = g.data() + (n * co_n + co) * ho * wo;
              for (Index ci = 0; ci < ci_n; ++ci) {
                const Index in_base = (n * ci_n + ci) * d.h * d.w;
                for (Index ky = 0; ky < kh; ++ky) {
                  for (Index kx = 0; kx < kw; ++kx) {
                    const Index len = xr[kx].hi - xr[kx].lo;
                    if (len <= 0) continue;
                    const Index kidx = ((co * ci_n + ci) * kh + ky) * kw + kx;
                    const Scalar w = ker[kidx];
                    Scalar acc = 0;
                    for (Index oy = yr[ky].lo; oy < yr[ky].hi; ++oy) {
                      const Index iy = oy * s + yoff[ky];
                      const Index in_off = in_base + iy * d.w + xr[kx].lo * s + xoff[kx];
                      const Scalar* grow = gp + oy * wo + xr[kx].lo;
                      if (want_in) axpy_scatter(len, w, grow, gi.data() + in_off, s);
                      if (want_k) acc += dot_strided(len, grow, in + in_off, s);
                    }
                    if (want_k) gk[kidx] += acc;
                  }
                }
              }
            }
          }
        }
        if (want_in) input.accumulate_grad(gi);
        if (want_k) kernel.accumulate_grad(gk);
        if (bias.defined() && bias.requires_grad()) {
          ArrayX<Scalar> gb = ArrayX<Scalar>::Zero(co_n);
          for (Index n = 0; n < d.n; ++n) {
            for (Index co = 0; co < co_n; ++co) {
              gb[co] += g.segment((n * co_n + co) * ho * wo, ho * wo).sum();
            }
          }
          bias.accumulate_grad(gb);
        }
      });
}

template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& input, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample: target extents must be positive");
  if (input.rank() < 2) throw ShapeError("bilinear_upsample: need at least 2 dimensions, got " + to_string(input.shape()));
  const Index h = input.dim(-2), w = input.dim(-1);
  const Index planes = input.size() / (h * w);
  Shape out_shape = input.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape[out_shape.size() - 1] = out_w;
  if (out_h == h && out_w == w) {
    return input.reshape(std::move(out_shape));
  }
  auto ay = std::make_shared<ResampleAxis>(resample_axis(h, out_h));
  auto ax = std::make_shared<ResampleAxis>(resample_axis(w, out_w));

  ArrayX<Scalar> out(planes * out_h * out_w);
  const Scalar* src = input.data();
  for (Index p = 0; p < planes; ++p) {
    const Scalar* ip = src + p * h * w;
    Scalar* op = out.data() + p * out_h * out_w;
    for (Index y = 0; y < out_h; ++y) {
      const Scalar fy = static_cast<Scalar>(ay->frac[y]);
      const Scalar* r0 = ip + ay->i0[y] * w;
      const Scalar* r1 = ip + ay->i1[y] * w;
      for (Index x = 0; x < out_w; ++x) {
        const Scalar fx = static_cast<Scalar>(ax->frac[x]);
        const Index x0 = ax->i0[x], x1 = ax->i1[x];
        const Scalar top = (Scalar(1) - fx) * r0[x0] + fx * r0[x1];
        const Scalar bot = (Scalar(1) - fx) * r1[x0] + fx * r1[x1];
        op[y * out_w + x] = (Scalar(1) - fy) * top + fy * bot;
      }
    }
  }
  return make_op_result<Scalar>(std::move(out_shape), std::move(out), {input},
                                [input, ay, ax, planes, h, w, out_h, out_w](const ArrayX<Scalar>& g) {
                                  ArrayX<Scalar> gi = ArrayX<Scalar>::Zero(input.size());
                                  for (Index p = 0; p < planes; ++p) {
                                    Scalar* gp = gi.data() + p * h * w;
                                    const Scalar* go = g.data() + p * out_h * out_w;
                                    for (Index y = 0; y < out_h; ++y) {
                                      const Scalar fy = static_cast<Scalar>(ay->frac[y]);
                                      Scalar* r0 = gp + ay->i0[y] * w;
                                      Scalar* r1 = gp + ay->i1[y] * w;
                                      for (Index x = 0; x < out_w; ++x) {
                                        const Scalar fx = static_cast<Scalar>(ax->frac[x]);
                                        const Scalar v = go[y * out_w + x];
                                        const Scalar vt = (Scalar(1) - fy) * v, vb = fy * v;
                                        r0[ax->i0[x]] += (Scalar(1) - fx) * vt;
                                        r0[ax->i1[x]] += fx * vt;
                                        r1[ax->i0[x]] += (Scalar(1) - fx) * vb;
                                        r1[ax->i1[x]] += fx * vb;
                                      }
                                    }
                                  }
                                  input.accumulate_grad(gi);
                                });
}

template <typename Scalar>
Tensor<Scalar> spatial_softmax(const Tensor<Scalar>& map) {
  if (map.rank() < 2) throw ShapeError("spatial_softmax: need at least 2 dimensions, got " + to_string(map.shape()));
  const Index area = map.dim(-2) * map.dim(-1);
  const Index planes = map.size() / area;
  ArrayX<Scalar> out(map.size());
  for (Index p = 0; p < planes; ++p) {
    auto x = map.value().segment(p * area, area);
    auto y = out.segment(p * area, area);
    y = (x - x.maxCoeff()).exp();
    y /= y.sum();
  }
  ArrayX<Scalar> saved = out;
  return make_op_result<Scalar>(map.shape(), std::move(out), {map},
                                [map, saved = std::move(saved), planes, area](const ArrayX<Scalar>& g) {
                                  ArrayX<Scalar> gi(map.size());
                                  for (Index p = 0; p < planes; ++p) {
                                    auto y = saved.segment(p * area, area);
                                    auto gs = g.segment(p * area, area);
                                    gi.segment(p * area, area) = y * (gs - (gs * y).sum());
                                  }
                                  map.accumulate_grad(gi);
                                });
}

template <typename Scalar>
Tensor<Scalar> channel_softmax(const Tensor<Scalar>& input) {
  const ImageDims d = image_dims(input.shape(), "channel_softmax");
  const Index area = d.h * d.w;
  ArrayX<Scalar> out(input.size());
  for (Index n = 0; n < d.n; ++n) {
    const Index base = n * d.c * area;
    ArrayX<Scalar> m = input.value().segment(base, area);
    for (Index c = 1; c < d.c; ++c) m = m.max(input.value().segment(base + c * area, area));
    ArrayX<Scalar> total = ArrayX<Scalar>::Zero(area);
    for (Index c = 0; c < d.c; ++c) {
      auto y = out.segment(base + c * area, area);
      y = (input.value().segment(base + c * area, area) - m).exp();
      total += y;
    }
    for (Index c = 0; c < d.c; ++c) out.segment(base + c * area, area) /= total;
  }
  ArrayX<Scalar> saved = out;
  return make_op_result<Scalar>(input.shape(), std::move(out), {input},
                                [input, saved = std::move(saved), d, area](const ArrayX<Scalar>& g) {
                                  ArrayX<Scalar> gi(input.size());
                                  for (Index n = 0; n < d.n; ++n) {
                                    const Index base = n * d.c * area;
                                    ArrayX<Scalar> dot = ArrayX<Scalar>::Zero(area);
                                    for (Index c = 0; c < d.c; ++c) {
                                      dot += g.segment(base + c * area, area) * saved.segment(base + c * area, area);
                                    }
                                    for (Index c = 0; c < d.c; ++c) {
                                      const Index o = base + c * area;
                                      gi.segment(o, area) = saved.segment(o, area) * (g.segment(o, area) - dot);
                                    }
                                  }
                                  input.accumulate_grad(gi);
                                });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return make_op_result<Scalar>(x.shape(), x.value().max(Scalar(0)), {x}, [x](const ArrayX<Scalar>& g) {
    x.accumulate_grad((x.value() > Scalar(0)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  ArrayX<Scalar> y = (Scalar(1) + (-x.value()).exp()).inverse();
  ArrayX<Scalar> saved = y;
  return make_op_result<Scalar>(x.shape(), std::move(y), {x}, [x, saved = std::move(saved)](const ArrayX<Scalar>& g) {
    x.accumulate_grad(g * saved * (Scalar(1) - saved));
  });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  return make_op_result<Scalar>(a.shape(), a.value() + b.value(), {a, b}, [a, b](const ArrayX<Scalar>& g) {
    a.accumulate_grad(g);
    b.accumulate_grad(g);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  return make_op_result<Scalar>(a.shape(), a.value() - b.value(), {a, b}, [a, b](const ArrayX<Scalar>& g) {
    a.accumulate_grad(g);
    b.accumulate_grad(-g);
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  return make_op_result<Scalar>(a.shape(), a.value() * b.value(), {a, b}, [a, b](const ArrayX<Scalar>& g) {
    a.accumulate_grad(g * b.value());
    b.accumulate_grad(g * a.value());
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  return make_op_result<Scalar>(a.shape(), a.value() * factor, {a},
                                [a, factor](const ArrayX<Scalar>& g) { a.accumulate_grad(g * factor); });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  ArrayX<Scalar> v(1);
  v[0] = a.value().sum();
  return make_op_result<Scalar>({1}, std::move(v), {a}, [a](const ArrayX<Scalar>& g) {
    a.accumulate_grad(ArrayX<Scalar>::Constant(a.size(), g[0]));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  ArrayX<Scalar> v(1);
  const Scalar n = static_cast<Scalar>(a.size());
  v[0] = a.value().sum() / n;
  return make_op_result<Scalar>({1}, std::move(v), {a}, [a, n](const ArrayX<Scalar>& g) {
    a.accumulate_grad(ArrayX<Scalar>::Constant(a.size(), g[0] / n));
  });
}

template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  ArrayX<Scalar> diff = a.value() - b.value();
  const Scalar n = static_cast<Scalar>(a.size());
  ArrayX<Scalar> v(1);
  v[0] = diff.square().sum() / n;
  return make_op_result<Scalar>({1}, std::move(v), {a, b}, [a, b, diff = std::move(diff), n](const ArrayX<Scalar>& g) {
    const Scalar k = Scalar(2) * g[0] / n;
    a.accumulate_grad(k * diff);
    b.accumulate_grad(-k * diff);
  });
}

template <typename Scalar>
Tensor<Scalar> max_pool2(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw ShapeError("max_pool2: need at least 2 dimensions, got " + to_string(x.shape()));
  const Index h = x.dim(-2), w = x.dim(-1), oh = h / 2, ow = w / 2;
  if (oh < 1 || ow < 1) throw ShapeError("max_pool2: input too small " + to_string(x.shape()));
  const Index planes = x.size() / (h * w);
  ArrayX<Scalar> out(planes * oh * ow);
  auto arg = std::make_shared<std::vector<Index>>(out.size());
  const Scalar* v = x.data();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < oh; ++y) {
      for (Index xx = 0; xx < ow; ++xx) {
        const Index base = p * h * w + 2 * y * w + 2 * xx;
        const Index cand[4] = {base, base + 1, base + w, base + w + 1};
        Index best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (v[cand[k]] > v[best]) best = cand[k];
        }
        const Index o = (p * oh + y) * ow + xx;
        out[o] = v[best];
        (*arg)[o] = best;
      }
    }
  }
  Shape s = x.shape();
  s[s.size() - 2] = oh;
  s[s.size() - 1] = ow;
  return make_op_result<Scalar>(std::move(s), std::move(out), {x}, [x, arg](const ArrayX<Scalar>& g) {
    ArrayX<Scalar> gi = ArrayX<Scalar>::Zero(x.size());
    for (Index o = 0; o < g.size(); ++o) gi[(*arg)[o]] += g[o];
    x.accumulate_grad(gi);
  });
}

template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw ShapeError("avg_pool2: need at least 2 dimensions, got " + to_string(x.shape()));
  const Index h = x.dim(-2), w = x.dim(-1), oh = h / 2, ow = w / 2;
  if (oh < 1 || ow < 1) throw ShapeError("avg_pool2: input too small " + to_string(x.shape()));
  const Index planes = x.size() / (h * w);
  ArrayX<Scalar> out(planes * oh * ow);
  const Scalar* v = x.data();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < oh; ++y) {
      for (Index xx = 0; xx < ow; ++xx) {
        const Index b = p * h * w + 2 * y * w + 2 * xx;
        out[(p * oh + y) * ow + xx] = (v[b] + v[b + 1] + v[b + w] + v[b + w + 1]) * Scalar(0.25);
      }
    }
  }
  Shape s = x.shape();
  s[s.size() - 2] = oh;
  s[s.size() - 1] = ow;
  return make_op_result<Scalar>(std::move(s), std::move(out), {x}, [x, planes, h, w, oh, ow](const ArrayX<Scalar>& g) {
    ArrayX<Scalar> gi = ArrayX<Scalar>::Zero(x.size());
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < oh; ++y) {
        for (Index xx = 0; xx < ow; ++xx) {
          const Scalar q = g[(p * oh + y) * ow + xx] * Scalar(0.25);
          const Index b = p * h * w + 2 * y * w + 2 * xx;
          gi[b] += q;
          gi[b + 1] += q;
          gi[b + w] += q;
          gi[b + w + 1] += q;
        }
      }
    }
    x.accumulate_grad(gi);
  });
}

template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& x, const Tensor<Scalar>& weights, const Tensor<Scalar>& bias) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (weights.rank() != 2) throw ShapeError("fully_connected: weights must be [O,F], got " + to_string(weights.shape()));
  const Index o_n = weights.dim(0), f_n = weights.dim(1);
  if (x.rank() != 1 && x.rank() != 2) throw ShapeError("fully_connected: input must be [F] or [N,F], got " + to_string(x.shape()));
  const Index n = x.rank() == 2 ? x.dim(0) : 1;
  if (x.dim(-1) != f_n) {
    throw ShapeError("fully_connected: weights expect " + std::to_string(f_n) + " features, input " +
                     to_string(x.shape()) + " has " + std::to_string(x.dim(-1)));
  }
  if (bias.size() != o_n) throw ShapeError("fully_connected: bias must have " + std::to_string(o_n) + " entries");
  Eigen::Map<const Mat> xm(x.data(), n, f_n);
  Eigen::Map<const Mat> wm(weights.data(), o_n, f_n);
  Mat y = xm * wm.transpose();
  y.rowwise() += Eigen::Map<const Vec>(bias.data(), o_n).transpose();
  ArrayX<Scalar> out = Eigen::Map<const ArrayX<Scalar>>(y.data(), y.size());
  Shape s = x.rank() == 2 ? Shape{n, o_n} : Shape{o_n};
  return make_op_result<Scalar>(std::move(s), std::move(out), {x, weights, bias},
                                [x, weights, bias, n, o_n, f_n](const ArrayX<Scalar>& g) {
                                  Eigen::Map<const Mat> gm(g.data(), n, o_n);
                                  if (x.requires_grad()) {
                                    Mat gx = gm * Eigen::Map<const Mat>(weights.data(), o_n, f_n);
                                    x.accumulate_grad(Eigen::Map<const ArrayX<Scalar>>(gx.data(), gx.size()));
                                  }
                                  if (weights.requires_grad()) {
                                    Mat gw = gm.transpose() * Eigen::Map<const Mat>(x.data(), n, f_n);
                                    weights.accumulate_grad(Eigen::Map<const ArrayX<Scalar>>(gw.data(), gw.size()));
                                  }
                                  if (bias.requires_grad()) {
                                    Vec gb = gm.colwise().sum().transpose();
                                    bias.accumulate_grad(gb.array());
                                  }
                                });
}

template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x) {
  const ImageDims d = image_dims(x.shape(), "flatten");
  if (x.rank() == 3) return x.reshape({d.c * d.h * d.w});
  return x.reshape({d.n, d.c * d.h * d.w});
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const ImageDims da = image_dims(a.shape(), "concat_channels");
  const ImageDims db = image_dims(b.shape(), "concat_channels");
  if (a.rank() != b.rank() || da.n != db.n || da.h != db.h || da.w != db.w) {
    throw ShapeError("concat_channels: incompatible " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index area = da.h * da.w, sa = da.c * area, sb = db.c * area;
  ArrayX<Scalar> out(a.size() + b.size());
  for (Index n = 0; n < da.n; ++n) {
    out.segment(n * (sa + sb), sa) = a.value().segment(n * sa, sa);
    out.segment(n * (sa + sb) + sa, sb) = b.value().segment(n * sb, sb);
  }
  return make_op_result<Scalar>(image_shape(a.shape(), da.c + db.c, da.h, da.w), std::move(out), {a, b},
                                [a, b, n_n = da.n, sa, sb](const ArrayX<Scalar>& g) {
                                  ArrayX<Scalar> ga(a.size()), gb(b.size());
                                  for (Index n = 0; n < n_n; ++n) {
                                    ga.segment(n * sa, sa) = g.segment(n * (sa + sb), sa);
                                    gb.segment(n * sb, sb) = g.segment(n * (sa + sb) + sa, sb);
                                  }
                                  a.accumulate_grad(ga);
                                  b.accumulate_grad(gb);
                                });
}

template <typename Scalar>
Tensor<Scalar> channel_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& scale_t, const Tensor<Scalar>& shift,
                            NormStats<Scalar>& stats, bool training) {
  const ImageDims d = image_dims(x.shape(), "channel_norm");
  if (scale_t.size() != d.c || shift.size() != d.c || stats.running_mean.size() != d.c ||
      stats.running_var.size() != d.c) {
    throw ShapeError("channel_norm: parameters do not match " + std::to_string(d.c) + " channels");
  }
  const Index area = d.h * d.w;
  const Index count = d.n * area;
  ArrayX<Scalar> mu(d.c), inv_std(d.c);
  if (training) {
    for (Index c = 0; c < d.c; ++c) {
      Scalar s = 0;
      for (Index n = 0; n < d.n; ++n) s += x.value().segment((n * d.c + c) * area, area).sum();
      mu[c] = s / static_cast<Scalar>(count);
      Scalar v = 0;
      for (Index n = 0; n < d.n; ++n) v += (x.value().segment((n * d.c + c) * area, area) - mu[c]).square().sum();
      const Scalar var = v / static_cast<Scalar>(count);
      inv_std[c] = Scalar(1) / std::sqrt(var + stats.eps);
      const Scalar unbiased = count > 1 ? v / static_cast<Scalar>(count - 1) : var;
      stats.running_mean[c] = (Scalar(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * mu[c];
      stats.running_var[c] = (Scalar(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    }
  } else {
    mu = stats.running_mean;
    inv_std = (stats.running_var + stats.eps).rsqrt();
  }
  ArrayX<Scalar> xhat(x.size());
  ArrayX<Scalar> out(x.size());
  for (Index n = 0; n < d.n; ++n) {
    for (Index c = 0; c < d.c; ++c) {
      const Index o = (n * d.c + c) * area;
      xhat.segment(o, area) = (x.value().segment(o, area) - mu[c]) * inv_std[c];
      out.segment(o, area) = xhat.segment(o, area) * scale_t.value()[c] + shift.value()[c];
    }
  }
  return make_op_result<Scalar>(
      x.shape(), std::move(out), {x, scale_t, shift},
      [x, scale_t, shift, xhat = std::move(xhat), inv_std, d, area, count, training](const ArrayX<Scalar>& g) {
        ArrayX<Scalar> gsum = ArrayX<Scalar>::Zero(d.c), gxh = ArrayX<Scalar>::Zero(d.c);
        for (Index n = 0; n < d.n; ++n) {
          for (Index c = 0; c < d.c; ++c) {
            const Index o = (n * d.c + c) * area;
            gsum[c] += g.segment(o, area).sum();
            gxh[c] += (g.segment(o, area) * xhat.segment(o, area)).sum();
          }
        }
        scale_t.accumulate_grad(gxh);
        shift.accumulate_grad(gsum);
        if (!x.requires_grad()) return;
        ArrayX<Scalar> gi(x.size());
        const Scalar m = static_cast<Scalar>(count);
        for (Index n = 0; n < d.n; ++n) {
          for (Index c = 0; c < d.c; ++c) {
            const Index o = (n * d.c + c) * area;
            const Scalar k = scale_t.value()[c] * inv_std[c];
            if (training) {
              gi.segment(o, area) = k * (g.segment(o, area) - gsum[c] / m - xhat.segment(o, area) * (gxh[c] / m));
            } else {
              gi.segment(o, area) = k * g.segment(o, area);
            }
          }
        }
        x.accumulate_grad(gi);
      });
}

#define SADKIT_INSTANTIATE_OPS(S)                                                                            \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Conv2dOptions&);     \
  template Tensor<S> bilinear_upsample(const Tensor<S>&, Index, Index);                                      \
  template Tensor<S> spatial_softmax(const Tensor<S>&);                                                      \
  template Tensor<S> channel_softmax(const Tensor<S>&);                                                      \
  template Tensor<S> relu(const Tensor<S>&);                                                                 \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                              \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> scale(const Tensor<S>&, S);                                                             \
  template Tensor<S> sum(const Tensor<S>&);                                                                  \
  template Tensor<S> mean(const Tensor<S>&);                                                                 \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> max_pool2(const Tensor<S>&);                                                            \
  template Tensor<S> avg_pool2(const Tensor<S>&);                                                            \
  template Tensor<S> fully_connected(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                  \
  template Tensor<S> flatten(const Tensor<S>&);                                                              \
  template Tensor<S> concat_channels(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> channel_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, NormStats<S>&, bool);

SADKIT_INSTANTIATE_OPS(float)
SADKIT_INSTANTIATE_OPS(double)

#undef SADKIT_INSTANTIATE_OPS

}  // namespace sadkit
