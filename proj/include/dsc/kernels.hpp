// Forward and backward kernels for every operator the network uses.
//
// Backward functions accumulate (+=) into caller-provided gradient buffers so
// that several consumers of one value can share a buffer.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dsc/parallel.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Weights (out, in, kh, kw), bias (out, 1, 1, 1).
template <typename T>
struct ConvParams {
  Tensor<T> weights;
  Tensor<T> bias;
  ConvSpec spec;
};

namespace kernels {

inline Shape conv_output_shape(const Shape& x, const Shape& w, const Shape& b, ConvSpec spec) {
  if (x.c != w.c) {
    throw ConfigError("conv2d: input " + x.str() + " has " + std::to_string(x.c) +
                      " channels but weights " + w.str() + " expect " + std::to_string(w.c));
  }
  if (b.numel() != w.n) {
    throw ConfigError("conv2d: bias " + b.str() + " does not match out_channels of weights " +
                      w.str());
  }
  if (spec.stride == 0) throw ConfigError("conv2d: stride must be positive");
  const auto span_h = static_cast<std::ptrdiff_t>(x.h + 2 * spec.padding) - static_cast<std::ptrdiff_t>(w.h);
  const auto span_w = static_cast<std::ptrdiff_t>(x.w + 2 * spec.padding) - static_cast<std::ptrdiff_t>(w.w);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<std::ptrdiff_t>(spec.stride) != 0 ||
      span_w % static_cast<std::ptrdiff_t>(spec.stride) != 0) {
    throw ConfigError("conv2d: input " + x.str() + " with kernel " + w.str() +
                      " does not give integer output dims");
  }
  return {x.n, w.n, static_cast<std::size_t>(span_h) / spec.stride + 1,
          static_cast<std::size_t>(span_w) / spec.stride + 1};
}

namespace detail {
// Output indices o in [lo, hi) such that o*stride + k - pad lies in [0, extent).
inline void valid_range(std::ptrdiff_t extent, std::ptrdiff_t out_extent, std::ptrdiff_t k,
                        std::ptrdiff_t pad, std::ptrdiff_t stride, std::ptrdiff_t& lo,
                        std::ptrdiff_t& hi) {
  const std::ptrdiff_t shift = k - pad;
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const std::ptrdiff_t last = extent - 1 - shift;
  hi = last < 0 ? 0 : std::min(out_extent, last / stride + 1);
  if (hi < lo) hi = lo;
}
}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         ConvSpec spec) {
  const Shape os = conv_output_shape(x.shape(), w.shape(), b.shape(), spec);
  Tensor<T> out(os);
  const auto H = static_cast<std::ptrdiff_t>(x.shape().h);
  const auto W = static_cast<std::ptrdiff_t>(x.shape().w);
  const auto Ho = static_cast<std::ptrdiff_t>(os.h);
  const auto Wo = static_cast<std::ptrdiff_t>(os.w);
  const auto s = static_cast<std::ptrdiff_t>(spec.stride);
  const auto p = static_cast<std::ptrdiff_t>(spec.padding);
  const std::size_t C = x.shape().c, KH = w.shape().h, KW = w.shape().w;
  for (std::size_t n = 0; n < os.n; ++n) {
    parallel_for(0, os.c, [&](std::size_t oc) {
      T* o = out.plane(n, oc);
      std::fill(o, o + os.plane(), b[oc]);
      for (std::size_t ic = 0; ic < C; ++ic) {
        const T* in = x.plane(n, ic);
        for (std::size_t ky = 0; ky < KH; ++ky) {
          std::ptrdiff_t ylo, yhi;
          detail::valid_range(H, Ho, static_cast<std::ptrdiff_t>(ky), p, s, ylo, yhi);
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const T wv = w.at(oc, ic, ky, kx);
            std::ptrdiff_t xlo, xhi;
            detail::valid_range(W, Wo, static_cast<std::ptrdiff_t>(kx), p, s, xlo, xhi);
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
            for (std::ptrdiff_t oy = ylo; oy < yhi; ++oy) {
              const T* irow = in + (oy * s + static_cast<std::ptrdiff_t>(ky) - p) * W;
              T* orow = o + oy * Wo;
              if (s == 1) {
                for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * irow[ox + dx];
              } else {
                for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) orow[ox] += wv * irow[ox * s + dx];
              }
            }
          }
        }
      }
    }, C * KH * KW * os.plane());
  }
  return out;
}

/// Accumulates gradients of conv2d. Any of gx, gw, gb may be null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, ConvSpec spec, const Tensor<T>& gout,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const Shape& os = gout.shape();
  const auto H = static_cast<std::ptrdiff_t>(x.shape().h);
  const auto W = static_cast<std::ptrdiff_t>(x.shape().w);
  const auto Ho = static_cast<std::ptrdiff_t>(os.h);
  const auto Wo = static_cast<std::ptrdiff_t>(os.w);
  const auto s = static_cast<std::ptrdiff_t>(spec.stride);
  const auto p = static_cast<std::ptrdiff_t>(spec.padding);
  const std::size_t C = x.shape().c, KH = w.shape().h, KW = w.shape().w, OC = os.c;
  for (std::size_t n = 0; n < os.n; ++n) {
    if (gx != nullptr) {
      parallel_for(0, C, [&](std::size_t ic) {
        T* gin = gx->plane(n, ic);
        for (std::size_t oc = 0; oc < OC; ++oc) {
          const T* g = gout.plane(n, oc);
          for (std::size_t ky = 0; ky < KH; ++ky) {
            std::ptrdiff_t ylo, yhi;
            detail::valid_range(H, Ho, static_cast<std::ptrdiff_t>(ky), p, s, ylo, yhi);
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const T wv = w.at(oc, ic, ky, kx);
              std::ptrdiff_t xlo, xhi;
              detail::valid_range(W, Wo, static_cast<std::ptrdiff_t>(kx), p, s, xlo, xhi);
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
              for (std::ptrdiff_t oy = ylo; oy < yhi; ++oy) {
                T* irow = gin + (oy * s + static_cast<std::ptrdiff_t>(ky) - p) * W;
                const T* grow = g + oy * Wo;
                for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) irow[ox * s + dx] += wv * grow[ox];
              }
            }
          }
        }
      }, OC * KH * KW * os.plane());
    }
    if (gw != nullptr || gb != nullptr) {
      parallel_for(0, OC, [&](std::size_t oc) {
        const T* g = gout.plane(n, oc);
        if (gb != nullptr) {
          T acc = 0;
          for (std::size_t i = 0; i < os.plane(); ++i) acc += g[i];
          (*gb)[oc] += acc;
        }
        if (gw == nullptr) return;
        for (std::size_t ic = 0; ic < C; ++ic) {
          const T* in = x.plane(n, ic);
          for (std::size_t ky = 0; ky < KH; ++ky) {
            std::ptrdiff_t ylo, yhi;
            detail::valid_range(H, Ho, static_cast<std::ptrdiff_t>(ky), p, s, ylo, yhi);
            for (std::size_t kx = 0; kx < KW; ++kx) {
              std::ptrdiff_t xlo, xhi;
              detail::valid_range(W, Wo, static_cast<std::ptrdiff_t>(kx), p, s, xlo, xhi);
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
              T acc = 0;
              for (std::ptrdiff_t oy = ylo; oy < yhi; ++oy) {
                const T* irow = in + (oy * s + static_cast<std::ptrdiff_t>(ky) - p) * W;
                const T* grow = g + oy * Wo;
                for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * irow[ox * s + dx];
              }
              gw->at(oc, ic, ky, kx) += acc;
            }
          }
        }
      }, C * KH * KW * os.plane());
    }
  }
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

// Subgradient at exactly 0 is 0.
template <typename T>
void relu_backward(const Tensor<T>& x, const Tensor<T>& gout, Tensor<T>& gx) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > T(0)) gx[i] += gout[i];
  }
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  return out;
}

/// Uses the forward output y = sigmoid(x).
template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gout, Tensor<T>& gx) {
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gout[i] * y[i] * (T(1) - y[i]);
}

template <typename T>
Tensor<T> mul_forward(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "elementwise_mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
void mul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& gout, Tensor<T>* ga,
                  Tensor<T>* gb) {
  for (std::size_t i = 0; i < gout.size(); ++i) {
    if (ga != nullptr) (*ga)[i] += gout[i] * b[i];
    if (gb != nullptr) (*gb)[i] += gout[i] * a[i];
  }
}

/// a (n, C, h, w) times b (n, 1, h, w) broadcast over channels.
template <typename T>
Tensor<T> mul_channel_broadcast_forward(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.c != 1 || sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ConfigError("channel-broadcast multiply: " + sa.str() + " vs " + sb.str());
  }
  Tensor<T> out(sa);
  for (std::size_t n = 0; n < sa.n; ++n) {
    const T* m = b.plane(n, 0);
    for (std::size_t c = 0; c < sa.c; ++c) {
      const T* x = a.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < sa.plane(); ++i) o[i] = x[i] * m[i];
    }
  }
  return out;
}

template <typename T>
void mul_channel_broadcast_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& gout,
                                    Tensor<T>* ga, Tensor<T>* gb) {
  const Shape& sa = a.shape();
  for (std::size_t n = 0; n < sa.n; ++n) {
    const T* m = b.plane(n, 0);
    for (std::size_t c = 0; c < sa.c; ++c) {
      const T* x = a.plane(n, c);
      const T* g = gout.plane(n, c);
      if (ga != nullptr) {
        T* gap = ga->plane(n, c);
        for (std::size_t i = 0; i < sa.plane(); ++i) gap[i] += g[i] * m[i];
      }
      if (gb != nullptr) {
        T* gbp = gb->plane(n, 0);
        for (std::size_t i = 0; i < sa.plane(); ++i) gbp[i] += g[i] * x[i];
      }
    }
  }
}

template <typename T>
Tensor<T> concat_forward(const std::vector<const Tensor<T>*>& xs) {
  if (xs.empty()) throw ConfigError("concat_channels: no inputs");
  const Shape& first = xs.front()->shape();
  std::size_t channels = 0;
  for (const auto* x : xs) {
    const Shape& s = x->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ConfigError("concat_channels: spatial mismatch " + first.str() + " vs " + s.str());
    }
    channels += s.c;
  }
  Tensor<T> out({first.n, channels, first.h, first.w});
  for (std::size_t n = 0; n < first.n; ++n) {
    std::size_t c0 = 0;
    for (const auto* x : xs) {
      std::copy(x->plane(n, 0), x->plane(n, 0) + x->shape().c * first.plane(), out.plane(n, c0));
      c0 += x->shape().c;
    }
  }
  return out;
}

/// Channels [begin, begin + count) of x.
template <typename T>
Tensor<T> slice_channels_forward(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (begin + count > s.c) {
    throw ConfigError("slice_channels: range [" + std::to_string(begin) + ", " +
                      std::to_string(begin + count) + ") exceeds " + s.str());
  }
  Tensor<T> out({s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy(x.plane(n, begin), x.plane(n, begin) + count * s.plane(), out.plane(n, 0));
  }
  return out;
}

template <typename T>
void slice_channels_backward(const Tensor<T>& gout, std::size_t begin, Tensor<T>& gx) {
  const Shape& s = gout.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* g = gout.plane(n, 0);
    T* d = gx.plane(n, begin);
    for (std::size_t i = 0; i < s.c * s.plane(); ++i) d[i] += g[i];
  }
}

namespace detail {
struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

// Corner-aligned source coordinate for each output index.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src =
        out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1)
                : 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear_forward(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (out_h == 0 || out_w == 0) throw ConfigError("upsample_bilinear: zero target dims");
  if (out_h < s.h || out_w < s.w) {
    throw ConfigError("upsample_bilinear: target " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) + " smaller than input " + s.str());
  }
  const auto ty = detail::lerp_taps(s.h, out_h);
  const auto tx = detail::lerp_taps(s.w, out_w);
  Tensor<T> out({s.n, s.c, out_h, out_w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* in = x.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty[oy].frac);
        const T* r0 = in + ty[oy].i0 * s.w;
        const T* r1 = in + ty[oy].i1 * s.w;
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx[ox].frac);
          const T top = r0[tx[ox].i0] + fx * (r0[tx[ox].i1] - r0[tx[ox].i0]);
          const T bot = r1[tx[ox].i0] + fx * (r1[tx[ox].i1] - r1[tx[ox].i0]);
          o[oy * out_w + ox] = top + fy * (bot - top);
        }
      }
    }
  }
  return out;
}

template <typename T>
void upsample_bilinear_backward(const Tensor<T>& gout, Tensor<T>& gx) {
  const Shape& s = gx.shape();
  const std::size_t out_h = gout.shape().h, out_w = gout.shape().w;
  const auto ty = detail::lerp_taps(s.h, out_h);
  const auto tx = detail::lerp_taps(s.w, out_w);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* gi = gx.plane(n, c);
      const T* g = gout.plane(n, c);
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty[oy].frac);
        T* r0 = gi + ty[oy].i0 * s.w;
        T* r1 = gi + ty[oy].i1 * s.w;
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx[ox].frac);
          const T v = g[oy * out_w + ox];
          r0[tx[ox].i0] += v * (T(1) - fx) * (T(1) - fy);
          r0[tx[ox].i1] += v * fx * (T(1) - fy);
          r1[tx[ox].i0] += v * (T(1) - fx) * fy;
          r1[tx[ox].i1] += v * fx * fy;
        }
      }
    }
  }
}

/// 2x2 stride-2 max pooling. `argmax` receives the flat input index chosen for
/// every output element (first index wins ties).
template <typename T>
Tensor<T> max_pool2_forward(const Tensor<T>& x, std::vector<std::size_t>& argmax) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ConfigError("max_pool2: odd spatial dims in " + s.str());
  }
  Tensor<T> out({s.n, s.c, s.h / 2, s.w / 2});
  argmax.assign(out.size(), 0);
  std::size_t k = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t oy = 0; oy < s.h / 2; ++oy) {
        for (std::size_t ox = 0; ox < s.w / 2; ++ox, ++k) {
          std::size_t best = x.index(n, c, 2 * oy, 2 * ox);
          const std::size_t cand[3] = {best + 1, best + s.w, best + s.w + 1};
          for (std::size_t j : cand) {
            if (x[j] > x[best]) best = j;
          }
          out[k] = x[best];
          argmax[k] = best;
        }
      }
    }
  }
  return out;
}

template <typename T>
void max_pool2_backward(const std::vector<std::size_t>& argmax, const Tensor<T>& gout,
                        Tensor<T>& gx) {
  for (std::size_t k = 0; k < gout.size(); ++k) gx[argmax[k]] += gout[k];
}

}  // namespace kernels
}  // namespace dsc
