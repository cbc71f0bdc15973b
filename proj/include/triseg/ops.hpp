#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "triseg/tensor.hpp"

namespace triseg {

/// Geometry of an anisotropic convolution: either an intra-slice 3x3x1
/// kernel (optionally dilated in-plane) or an inter-slice 1x1x3 kernel.
/// Zero same-size padding is implied; strides other than 1 are not
/// supported by conv_aniso (downsampling is a separate pooling op).
struct KernelSpec {
  std::array<int, 3> kernel{3, 3, 1};
  std::array<int, 3> dilation{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};

  static KernelSpec intra_slice(int dilation = 1) {
    return {{3, 3, 1}, {dilation, dilation, 1}, {1, 1, 1}};
  }
  static KernelSpec inter_slice() { return {{1, 1, 3}, {1, 1, 1}, {1, 1, 1}}; }
};

inline void validate_kernel_spec(const KernelSpec& s) {
  for (int a = 0; a < 3; ++a) {
    if (s.kernel[a] < 1 || s.kernel[a] % 2 == 0)
      throw std::invalid_argument("kernel spec: extents must be odd and positive");
    if (s.dilation[a] < 1 || s.dilation[a] > 3)
      throw std::invalid_argument("kernel spec: dilation must be in {1,2,3}");
    if (s.stride[a] != 1)
      throw std::invalid_argument("kernel spec: conv stride must be 1 (use downsample2d)");
  }
  bool intra = s.kernel[2] == 1;
  bool inter = s.kernel[0] == 1 && s.kernel[1] == 1;
  if (!intra && !inter)
    throw std::invalid_argument(
        "kernel spec: kernel must be intra-slice (kz=1) or inter-slice (kx=ky=1)");
}

namespace detail {

template <class T>
inline void axpy(T* __restrict dst, const T* __restrict src, T a, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

// The reduction is explicitly licensed for vectorization; the summation
// order is fixed by the binary and the run length, so results stay
// reproducible.
template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, int64_t n) {
  T s = T(0);
#pragma omp simd reduction(+ : s)
  for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void expect(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct ConvDims {
  int64_t B, Ci, Co, X, Y, Z;
  int kx, ky, kz, dx, dy, dz;
};

// dst[b,o,x,y,z] += w * src[b,i,x+ox,y+oy,z+oz], clipped to the volume.
// The (y,z) inner region collapses to one contiguous run when the kernel
// does not reach along z.
template <class T>
inline void conv_tap_axpy(T* dst, const T* src, T w, const ConvDims& d, int ox, int oy, int oz) {
  const int64_t X = d.X, Y = d.Y, Z = d.Z;
  const int64_t x0 = std::max<int64_t>(0, -ox), x1 = std::min<int64_t>(X, X - ox);
  const int64_t y0 = std::max<int64_t>(0, -oy), y1 = std::min<int64_t>(Y, Y - oy);
  const int64_t z0 = std::max<int64_t>(0, -oz), z1 = std::min<int64_t>(Z, Z - oz);
  if (x0 >= x1 || y0 >= y1 || z0 >= z1) return;
  if (z1 - z0 == Z) {
    const int64_t run = (y1 - y0) * Z;
    for (int64_t x = x0; x < x1; ++x)
      axpy(dst + (x * Y + y0) * Z, src + ((x + ox) * Y + y0 + oy) * Z, w, run);
  } else {
    for (int64_t x = x0; x < x1; ++x)
      for (int64_t y = y0; y < y1; ++y)
        axpy(dst + (x * Y + y) * Z + z0, src + ((x + ox) * Y + y + oy) * Z + z0 + oz, w, z1 - z0);
  }
}

template <class T>
inline T conv_tap_dot(const T* a, const T* b, const ConvDims& d, int ox, int oy, int oz) {
  const int64_t X = d.X, Y = d.Y, Z = d.Z;
  const int64_t x0 = std::max<int64_t>(0, -ox), x1 = std::min<int64_t>(X, X - ox);
  const int64_t y0 = std::max<int64_t>(0, -oy), y1 = std::min<int64_t>(Y, Y - oy);
  const int64_t z0 = std::max<int64_t>(0, -oz), z1 = std::min<int64_t>(Z, Z - oz);
  T s = T(0);
  if (x0 >= x1 || y0 >= y1 || z0 >= z1) return s;
  if (z1 - z0 == Z) {
    const int64_t run = (y1 - y0) * Z;
    for (int64_t x = x0; x < x1; ++x)
      s += dot(a + (x * Y + y0) * Z, b + ((x + ox) * Y + y0 + oy) * Z, run);
  } else {
    for (int64_t x = x0; x < x1; ++x)
      for (int64_t y = y0; y < y1; ++y)
        s += dot(a + (x * Y + y) * Z + z0, b + ((x + ox) * Y + y + oy) * Z + z0 + oz, z1 - z0);
  }
  return s;
}

}  // namespace detail

/// Dilated anisotropic cross-correlation with zero same-size padding.
/// input [B,Ci,X,Y,Z], weights [Co,Ci,kx,ky,kz], bias [Co] -> [B,Co,X,Y,Z].
template <class T>
Tensor<T> conv_aniso(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                     const KernelSpec& spec) {
  validate_kernel_spec(spec);
  const Shape& xs = input.shape();
  const Shape& ws = weights.shape();
  detail::expect(xs.size() == 5, "conv_aniso: input must be 5-d [B,C,X,Y,Z], got " + shape_str(xs));
  detail::expect(ws.size() == 5, "conv_aniso: weights must be 5-d [Co,Ci,kx,ky,kz]");
  detail::expect(ws[2] == spec.kernel[0] && ws[3] == spec.kernel[1] && ws[4] == spec.kernel[2],
                 "conv_aniso: weight extents " + shape_str(ws) + " do not match kernel spec");
  detail::expect(ws[1] == xs[1], "conv_aniso: input has " + std::to_string(xs[1]) +
                                     " channels but weights expect " + std::to_string(ws[1]));
  detail::expect(bias.shape().size() == 1 && bias.shape()[0] == ws[0],
                 "conv_aniso: bias must have one value per output channel");
  detail::expect(all_finite(input), "conv_aniso: non-finite values in input");

  const detail::ConvDims d{xs[0], xs[1], ws[0],         xs[2],          xs[3],          xs[4],
                           (int)ws[2], (int)ws[3], (int)ws[4], spec.dilation[0], spec.dilation[1],
                           spec.dilation[2]};
  const int cx = (d.kx - 1) / 2, cy = (d.ky - 1) / 2, cz = (d.kz - 1) / 2;
  const int64_t plane = d.X * d.Y * d.Z;

  std::vector<T> out(d.B * d.Co * plane);
  const T* xv = input.values().data();
  const T* wv = weights.values().data();
  const T* bv = bias.values().data();
  for (int64_t b = 0; b < d.B; ++b)
    for (int64_t co = 0; co < d.Co; ++co) {
      T* dst = out.data() + (b * d.Co + co) * plane;
      std::fill(dst, dst + plane, bv[co]);
      for (int64_t ci = 0; ci < d.Ci; ++ci) {
        const T* src = xv + (b * d.Ci + ci) * plane;
        const T* wk = wv + (co * d.Ci + ci) * d.kx * d.ky * d.kz;
        for (int tx = 0; tx < d.kx; ++tx)
          for (int ty = 0; ty < d.ky; ++ty)
            for (int tz = 0; tz < d.kz; ++tz) {
              T w = wk[(tx * d.ky + ty) * d.kz + tz];
              detail::conv_tap_axpy(dst, src, w, d, (tx - cx) * d.dx, (ty - cy) * d.dy,
                                    (tz - cz) * d.dz);
            }
      }
    }

  auto xn = input.node();
  auto wn = weights.node();
  auto bn = bias.node();
  auto backward = [xn, wn, bn, d, cx, cy, cz, plane](detail::Node<T>& node) {
    const T* go = node.grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      // grad wrt input: scatter each tap back through the same clipping
      for (int64_t b = 0; b < d.B; ++b)
        for (int64_t ci = 0; ci < d.Ci; ++ci) {
          T* gin = xn->grad.data() + (b * d.Ci + ci) * plane;
          for (int64_t co = 0; co < d.Co; ++co) {
            const T* gsrc = go + (b * d.Co + co) * plane;
            const T* wk = wn->value.data() + (co * d.Ci + ci) * d.kx * d.ky * d.kz;
            for (int tx = 0; tx < d.kx; ++tx)
              for (int ty = 0; ty < d.ky; ++ty)
                for (int tz = 0; tz < d.kz; ++tz) {
                  T w = wk[(tx * d.ky + ty) * d.kz + tz];
                  const int ox = (tx - cx) * d.dx, oy = (ty - cy) * d.dy, oz = (tz - cz) * d.dz;
                  // input gradient is the adjoint tap: same clipping,
                  // negated offsets
                  detail::conv_tap_axpy(gin, gsrc, w, d, -ox, -oy, -oz);
                }
          }
        }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      for (int64_t co = 0; co < d.Co; ++co)
        for (int64_t ci = 0; ci < d.Ci; ++ci) {
          T* gw = wn->grad.data() + (co * d.Ci + ci) * d.kx * d.ky * d.kz;
          for (int tx = 0; tx < d.kx; ++tx)
            for (int ty = 0; ty < d.ky; ++ty)
              for (int tz = 0; tz < d.kz; ++tz) {
                T s = T(0);
                for (int64_t b = 0; b < d.B; ++b)
                  s += detail::conv_tap_dot(go + (b * d.Co + co) * plane,
                                            xn->value.data() + (b * d.Ci + ci) * plane, d,
                                            (tx - cx) * d.dx, (ty - cy) * d.dy, (tz - cz) * d.dz);
                gw[(tx * d.ky + ty) * d.kz + tz] += s;
              }
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t co = 0; co < d.Co; ++co) {
        T s = T(0);
        for (int64_t b = 0; b < d.B; ++b) {
          const T* g = go + (b * d.Co + co) * plane;
          for (int64_t i = 0; i < plane; ++i) s += g[i];
        }
        bn->grad[co] += s;
      }
    }
  };
  return Tensor<T>::result({d.B, d.Co, d.X, d.Y, d.Z}, std::move(out), {xn, wn, bn},
                           std::move(backward));
}

/// PReLU with one learned slope per channel: x >= 0 ? x : a_c * x.
template <class T>
Tensor<T> prelu(const Tensor<T>& input, const Tensor<T>& slope) {
  const Shape& xs = input.shape();
  detail::expect(xs.size() >= 2, "prelu: input must have a channel axis");
  detail::expect(slope.shape().size() == 1 && slope.shape()[0] == xs[1],
                 "prelu: slope must have one value per channel, got " + shape_str(slope.shape()));
  const int64_t B = xs[0], C = xs[1];
  const int64_t inner = input.numel() / (B * C);
  std::vector<T> out(input.numel());
  const T* xv = input.values().data();
  const T* av = slope.values().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T a = av[c];
      const T* src = xv + (b * C + c) * inner;
      T* dst = out.data() + (b * C + c) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] >= T(0) ? src[i] : a * src[i];
    }
  auto xn = input.node();
  auto an = slope.node();
  auto backward = [xn, an, B, C, inner](detail::Node<T>& node) {
    const T* go = node.grad.data();
    const bool want_x = xn->requires_grad, want_a = an->requires_grad;
    if (want_x) xn->ensure_grad();
    if (want_a) an->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const int64_t off = (b * C + c) * inner;
        const T* x = xn->value.data() + off;
        const T* g = go + off;
        if (want_x) {
          T* gx = xn->grad.data() + off;
          const T a = an->value[c];
          for (int64_t i = 0; i < inner; ++i) gx[i] += x[i] >= T(0) ? g[i] : a * g[i];
        }
        if (want_a) {
          T s = T(0);
          for (int64_t i = 0; i < inner; ++i)
            if (x[i] < T(0)) s += g[i] * x[i];
          an->grad[c] += s;
        }
      }
  };
  return Tensor<T>::result(xs, std::move(out), {xn, an}, std::move(backward));
}

enum class BnMode { kTrain, kInfer };

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;  // retention of the old running value

/// Running statistics owned by a batch-norm layer. Updated in train mode,
/// consumed in infer mode.
template <class T>
struct BnState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  int64_t updates = 0;

  explicit BnState(int64_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
  bool ready() const { return updates > 0; }
  /// Marks the state usable with identity statistics (mean 0, var 1).
  void set_identity() {
    std::fill(running_mean.begin(), running_mean.end(), T(0));
    std::fill(running_var.begin(), running_var.end(), T(1));
    updates = 1;
  }
};

/// Batch normalization over (batch, spatial) per channel with affine
/// transform. Train mode normalizes by batch statistics and updates the
/// running buffers; infer mode uses the running buffers.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BnState<T>& state, BnMode mode) {
  const Shape& xs = input.shape();
  detail::expect(xs.size() >= 2, "batch_norm: input must have a channel axis");
  const int64_t B = xs[0], C = xs[1];
  const int64_t inner = input.numel() / (B * C);
  detail::expect(gamma.shape().size() == 1 && gamma.shape()[0] == C,
                 "batch_norm: gamma must have one value per channel");
  detail::expect(beta.shape().size() == 1 && beta.shape()[0] == C,
                 "batch_norm: beta must have one value per channel");
  detail::expect(static_cast<int64_t>(state.running_mean.size()) == C,
                 "batch_norm: state channel count mismatch");
  if (mode == BnMode::kInfer && !state.ready())
    throw std::invalid_argument("batch_norm: infer mode with uninitialized running statistics");

  const T* xv = input.values().data();
  std::vector<T> mean(C), invstd(C);
  if (mode == BnMode::kTrain) {
    const double n = static_cast<double>(B * inner);
    for (int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* src = xv + (b * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) s += src[i];
      }
      const double m = s / n;
      double sq = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* src = xv + (b * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) {
          const double dv = src[i] - m;
          sq += dv * dv;
        }
      }
      const double var = sq / n;
      mean[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + kBnEps));
      state.running_mean[c] =
          static_cast<T>(kBnMomentum * state.running_mean[c] + (1.0 - kBnMomentum) * m);
      state.running_var[c] =
          static_cast<T>(kBnMomentum * state.running_var[c] + (1.0 - kBnMomentum) * var);
    }
    ++state.updates;
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + kBnEps));
    }
  }

  std::vector<T> out(input.numel());
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = xv + (b * C + c) * inner;
      T* dst = out.data() + (b * C + c) * inner;
      const T m = mean[c], is = invstd[c], g = gv[c], bb = bv[c];
      for (int64_t i = 0; i < inner; ++i) dst[i] = (src[i] - m) * is * g + bb;
    }

  auto xn = input.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto backward = [xn, gn, bn, B, C, inner, mean, invstd, mode](detail::Node<T>& node) {
    const T* go = node.grad.data();
    const double n = static_cast<double>(B * inner);
    for (int64_t c = 0; c < C; ++c) {
      const T m = mean[c], is = invstd[c];
      // channel-wise sums of g and g*xhat
      double s1 = 0, s2 = 0;
      for (int64_t b = 0; b < B; ++b) {
        const int64_t off = (b * C + c) * inner;
        const T* g = go + off;
        const T* x = xn->value.data() + off;
        for (int64_t i = 0; i < inner; ++i) {
          s1 += g[i];
          s2 += g[i] * (x[i] - m) * is;
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        gn->grad[c] += static_cast<T>(s2);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[c] += static_cast<T>(s1);
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        const T g0 = gn->value[c];
        for (int64_t b = 0; b < B; ++b) {
          const int64_t off = (b * C + c) * inner;
          const T* g = go + off;
          const T* x = xn->value.data() + off;
          T* gx = xn->grad.data() + off;
          if (mode == BnMode::kTrain) {
            const T c1 = static_cast<T>(s1 / n), c2 = static_cast<T>(s2 / n);
            for (int64_t i = 0; i < inner; ++i) {
              const T xhat = (x[i] - m) * is;
              gx[i] += g0 * is * (g[i] - c1 - xhat * c2);
            }
          } else {
            for (int64_t i = 0; i < inner; ++i) gx[i] += g0 * is * g[i];
          }
        }
      }
    }
  };
  return Tensor<T>::result(xs, std::move(out), {xn, gn, bn}, std::move(backward));
}

/// 2x2x1 max pooling with stride 2 in-plane; odd in-plane extents are
/// zero-padded to even (a padded zero can win the max). Gradient routes to
/// the argmax, first-scanned on ties.
template <class T>
Tensor<T> downsample2d(const Tensor<T>& input) {
  const Shape& xs = input.shape();
  detail::expect(xs.size() == 5, "downsample2d: input must be 5-d [B,C,X,Y,Z]");
  const int64_t B = xs[0], C = xs[1], X = xs[2], Y = xs[3], Z = xs[4];
  const int64_t X2 = (X + 1) / 2, Y2 = (Y + 1) / 2;
  std::vector<T> out(B * C * X2 * Y2 * Z);
  std::vector<int64_t> argmax(out.size(), -1);  // -1: the zero pad won
  const T* xv = input.values().data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = xv + bc * X * Y * Z;
    T* dst = out.data() + bc * X2 * Y2 * Z;
    int64_t* arg = argmax.data() + bc * X2 * Y2 * Z;
    for (int64_t x2 = 0; x2 < X2; ++x2)
      for (int64_t y2 = 0; y2 < Y2; ++y2)
        for (int64_t z = 0; z < Z; ++z) {
          T best = T(0);
          int64_t bi = -1;
          bool edge = 2 * x2 + 1 >= X || 2 * y2 + 1 >= Y;
          bool first = true;
          for (int64_t x = 2 * x2; x < std::min<int64_t>(2 * x2 + 2, X); ++x)
            for (int64_t y = 2 * y2; y < std::min<int64_t>(2 * y2 + 2, Y); ++y) {
              const int64_t idx = (x * Y + y) * Z + z;
              if (first || src[idx] > best) {
                best = src[idx];
                bi = idx;
                first = false;
              }
            }
          if (edge && T(0) > best) {  // implicit zero pad participates
            best = T(0);
            bi = -1;
          }
          dst[(x2 * Y2 + y2) * Z + z] = best;
          arg[(x2 * Y2 + y2) * Z + z] = bi;
        }
  }
  auto xn = input.node();
  auto backward = [xn, B, C, X, Y, Z, X2, Y2, argmax](detail::Node<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      T* gx = xn->grad.data() + bc * X * Y * Z;
      const int64_t* arg = argmax.data() + bc * X2 * Y2 * Z;
      const T* g = go + bc * X2 * Y2 * Z;
      for (int64_t i = 0; i < X2 * Y2 * Z; ++i)
        if (arg[i] >= 0) gx[arg[i]] += g[i];
    }
  };
  return Tensor<T>::result({B, C, X2, Y2, Z}, std::move(out), {xn}, std::move(backward));
}

namespace detail {

// Half-pixel (voxel-center) source coordinates for in-plane upsampling:
// the physical box spanned by the voxels is preserved.
struct LerpTable {
  std::vector<int64_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1-w1
};

inline LerpTable lerp_table(int64_t n_in, int factor) {
  LerpTable t;
  const int64_t n_out = n_in * factor;
  t.i0.resize(n_out);
  t.i1.resize(n_out);
  t.w1.resize(n_out);
  for (int64_t o = 0; o < n_out; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    double lo = std::floor(src);
    double w = src - lo;
    int64_t i0 = static_cast<int64_t>(lo);
    int64_t i1 = i0 + 1;
    if (i0 < 0) {
      i0 = 0;
      i1 = 0;
      w = 0.0;
    }
    if (i1 > n_in - 1) {
      i1 = n_in - 1;
      if (i0 > n_in - 1) i0 = n_in - 1;
      if (i0 == i1) w = 0.0;
    }
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w1[o] = w;
  }
  return t;
}

}  // namespace detail

/// Bilinear in-plane upsampling by an integer factor; the out-plane axis is
/// untouched. Voxel centers follow the half-pixel convention, clamped at
/// the borders.
template <class T>
Tensor<T> upsample2d(const Tensor<T>& input, int factor) {
  detail::expect(factor >= 1, "upsample2d: factor must be >= 1, got " + std::to_string(factor));
  const Shape& xs = input.shape();
  detail::expect(xs.size() == 5, "upsample2d: input must be 5-d [B,C,X,Y,Z]");
  const int64_t B = xs[0], C = xs[1], X = xs[2], Y = xs[3], Z = xs[4];
  const int64_t XO = X * factor, YO = Y * factor;
  const detail::LerpTable tx = detail::lerp_table(X, factor);
  const detail::LerpTable ty = detail::lerp_table(Y, factor);
  std::vector<T> out(B * C * XO * YO * Z);
  const T* xv = input.values().data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = xv + bc * X * Y * Z;
    T* dst = out.data() + bc * XO * YO * Z;
    for (int64_t xo = 0; xo < XO; ++xo) {
      const T wx1 = static_cast<T>(tx.w1[xo]), wx0 = T(1) - wx1;
      const T* r0 = src + tx.i0[xo] * Y * Z;
      const T* r1 = src + tx.i1[xo] * Y * Z;
      for (int64_t yo = 0; yo < YO; ++yo) {
        const T wy1 = static_cast<T>(ty.w1[yo]), wy0 = T(1) - wy1;
        const T* s00 = r0 + ty.i0[yo] * Z;
        const T* s01 = r0 + ty.i1[yo] * Z;
        const T* s10 = r1 + ty.i0[yo] * Z;
        const T* s11 = r1 + ty.i1[yo] * Z;
        T* o = dst + (xo * YO + yo) * Z;
        for (int64_t z = 0; z < Z; ++z)
          o[z] = wx0 * (wy0 * s00[z] + wy1 * s01[z]) + wx1 * (wy0 * s10[z] + wy1 * s11[z]);
      }
    }
  }
  auto xn = input.node();
  auto backward = [xn, B, C, X, Y, Z, XO, YO, tx, ty](detail::Node<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      T* gx = xn->grad.data() + bc * X * Y * Z;
      const T* g = go + bc * XO * YO * Z;
      for (int64_t xo = 0; xo < XO; ++xo) {
        const T wx1 = static_cast<T>(tx.w1[xo]), wx0 = T(1) - wx1;
        for (int64_t yo = 0; yo < YO; ++yo) {
          const T wy1 = static_cast<T>(ty.w1[yo]), wy0 = T(1) - wy1;
          const T* gr = g + (xo * YO + yo) * Z;
          T* g00 = gx + (tx.i0[xo] * Y + ty.i0[yo]) * Z;
          T* g01 = gx + (tx.i0[xo] * Y + ty.i1[yo]) * Z;
          T* g10 = gx + (tx.i1[xo] * Y + ty.i0[yo]) * Z;
          T* g11 = gx + (tx.i1[xo] * Y + ty.i1[yo]) * Z;
          for (int64_t z = 0; z < Z; ++z) {
            g00[z] += wx0 * wy0 * gr[z];
            g01[z] += wx0 * wy1 * gr[z];
            g10[z] += wx1 * wy0 * gr[z];
            g11[z] += wx1 * wy1 * gr[z];
          }
        }
      }
    }
  };
  return Tensor<T>::result({B, C, XO, YO, Z}, std::move(out), {xn}, std::move(backward));
}

/// Zero-pads the in-plane axes of [B,C,X,Y,Z] on the high side up to
/// (XO, YO). Used to make extents divisible before pooling; crop2d_to
/// strips the padding afterwards.
template <class T>
Tensor<T> pad2d_to(const Tensor<T>& input, int64_t XO, int64_t YO) {
  const Shape& xs = input.shape();
  detail::expect(xs.size() == 5, "pad2d_to: input must be 5-d [B,C,X,Y,Z]");
  const int64_t B = xs[0], C = xs[1], X = xs[2], Y = xs[3], Z = xs[4];
  detail::expect(XO >= X && YO >= Y, "pad2d_to: target extents smaller than input");
  if (XO == X && YO == Y) return input;
  std::vector<T> out(B * C * XO * YO * Z, T(0));
  const T* xv = input.values().data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t x = 0; x < X; ++x)
      for (int64_t y = 0; y < Y; ++y)
        std::copy(xv + ((bc * X + x) * Y + y) * Z, xv + ((bc * X + x) * Y + y + 1) * Z,
                  out.data() + ((bc * XO + x) * YO + y) * Z);
  auto xn = input.node();
  auto backward = [xn, B, C, X, Y, Z, XO, YO](detail::Node<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t x = 0; x < X; ++x)
        for (int64_t y = 0; y < Y; ++y) {
          const T* g = go + ((bc * XO + x) * YO + y) * Z;
          T* gx = xn->grad.data() + ((bc * X + x) * Y + y) * Z;
          for (int64_t z = 0; z < Z; ++z) gx[z] += g[z];
        }
  };
  return Tensor<T>::result({B, C, XO, YO, Z}, std::move(out), {xn}, std::move(backward));
}

/// Crops the in-plane axes of [B,C,X,Y,Z] down to (XO, YO), keeping the
/// low corner. Inverse of pad2d_to.
template <class T>
Tensor<T> crop2d_to(const Tensor<T>& input, int64_t XO, int64_t YO) {
  const Shape& xs = input.shape();
  detail::expect(xs.size() == 5, "crop2d_to: input must be 5-d [B,C,X,Y,Z]");
  const int64_t B = xs[0], C = xs[1], X = xs[2], Y = xs[3], Z = xs[4];
  detail::expect(XO <= X && YO <= Y && XO > 0 && YO > 0, "crop2d_to: bad target extents");
  if (XO == X && YO == Y) return input;
  std::vector<T> out(B * C * XO * YO * Z);
  const T* xv = input.values().data();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t x = 0; x < XO; ++x)
      for (int64_t y = 0; y < YO; ++y)
        std::copy(xv + ((bc * X + x) * Y + y) * Z, xv + ((bc * X + x) * Y + y) * Z + Z,
                  out.data() + ((bc * XO + x) * YO + y) * Z);
  auto xn = input.node();
  auto backward = [xn, B, C, X, Y, Z, XO, YO](detail::Node<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t x = 0; x < XO; ++x)
        for (int64_t y = 0; y < YO; ++y) {
          const T* g = go + ((bc * XO + x) * YO + y) * Z;
          T* gx = xn->grad.data() + ((bc * X + x) * Y + y) * Z;
          for (int64_t z = 0; z < Z; ++z) gx[z] += g[z];
        }
  };
  return Tensor<T>::result({B, C, XO, YO, Z}, std::move(out), {xn}, std::move(backward));
}

/// Per-voxel softmax over the channel axis of [B,C,...], C >= 2.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  const Shape& xs = input.shape();
  detail::expect(xs.size() >= 2 && xs[1] >= 2, "softmax_channels: need a channel axis with C >= 2");
  const int64_t B = xs[0], C = xs[1];
  const int64_t inner = input.numel() / (B * C);
  std::vector<T> out(input.numel());
  const T* xv = input.values().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < inner; ++i) {
      T m = xv[(b * C) * inner + i];
      for (int64_t c = 1; c < C; ++c) m = std::max(m, xv[(b * C + c) * inner + i]);
      T sum = T(0);
      for (int64_t c = 0; c < C; ++c) {
        const T e = std::exp(xv[(b * C + c) * inner + i] - m);
        out[(b * C + c) * inner + i] = e;
        sum += e;
      }
      for (int64_t c = 0; c < C; ++c) out[(b * C + c) * inner + i] /= sum;
    }
  auto xn = input.node();
  auto backward = [xn, B, C, inner](detail::Node<T>& node) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const T* go = node.grad.data();
    const T* p = node.value.data();  // the probabilities themselves
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < inner; ++i) {
        T dotpg = T(0);
        for (int64_t c = 0; c < C; ++c) {
          const int64_t idx = (b * C + c) * inner + i;
          dotpg += p[idx] * go[idx];
        }
        for (int64_t c = 0; c < C; ++c) {
          const int64_t idx = (b * C + c) * inner + i;
          xn->grad[idx] += p[idx] * (go[idx] - dotpg);
        }
      }
  };
  return Tensor<T>::result(xs, std::move(out), {xn}, std::move(backward));
}

/// Elementwise sum of two same-shape tensors (residual connection).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                             shape_str(b.shape()));
  std::vector<T> out(a.numel());
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  auto backward = [an, bn](detail::Node<T>& node) {
    for (auto& pn : {an, bn}) {
      if (!pn->requires_grad) continue;
      pn->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) pn->grad[i] += node.grad[i];
    }
  };
  return Tensor<T>::result(a.shape(), std::move(out), {an, bn}, std::move(backward));
}

/// Elementwise product (used to project outputs onto a fixed probe).
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<T> out(a.numel());
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  auto backward = [an, bn](detail::Node<T>& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i] * an->value[i];
    }
  };
  return Tensor<T>::result(a.shape(), std::move(out), {an, bn}, std::move(backward));
}

/// Sum of all elements, as a scalar tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  auto an = a.node();
  auto backward = [an](detail::Node<T>& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T g = node.grad[0];
    for (auto& gv : an->grad) gv += g;
  };
  return Tensor<T>::result({1}, {s}, {an}, std::move(backward));
}

/// Concatenation along the channel axis; all parts share batch and spatial
/// extents.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::expect(!parts.empty(), "concat_channels: need at least one part");
  const Shape& s0 = parts[0].shape();
  detail::expect(s0.size() >= 2, "concat_channels: parts must have a channel axis");
  int64_t C = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    detail::expect(s.size() == s0.size(), "concat_channels: rank mismatch");
    for (size_t a = 0; a < s.size(); ++a)
      if (a != 1)
        detail::expect(s[a] == s0[a], "concat_channels: non-channel extent mismatch " +
                                          shape_str(s) + " vs " + shape_str(s0));
    C += s[1];
  }
  const int64_t B = s0[0];
  int64_t inner = 1;
  for (size_t a = 2; a < s0.size(); ++a) inner *= s0[a];
  Shape os = s0;
  os[1] = C;
  std::vector<T> out(B * C * inner);
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  std::vector<int64_t> coffsets;
  int64_t coff = 0;
  for (const auto& p : parts) {
    const int64_t pc = p.shape()[1];
    const T* src = p.values().data();
    for (int64_t b = 0; b < B; ++b)
      std::copy(src + b * pc * inner, src + (b + 1) * pc * inner,
                out.data() + (b * C + coff) * inner);
    nodes.push_back(p.node());
    coffsets.push_back(coff);
    coff += pc;
  }
  auto backward = [nodes, coffsets, B, C, inner](detail::Node<T>& node) {
    const T* go = node.grad.data();
    for (size_t k = 0; k < nodes.size(); ++k) {
      auto& pn = nodes[k];
      if (!pn->requires_grad) continue;
      pn->ensure_grad();
      const int64_t pc = pn->shape[1];
      for (int64_t b = 0; b < B; ++b) {
        const T* g = go + (b * C + coffsets[k]) * inner;
        T* gx = pn->grad.data() + b * pc * inner;
        for (int64_t i = 0; i < pc * inner; ++i) gx[i] += g[i];
      }
    }
  };
  return Tensor<T>::result(std::move(os), std::move(out), nodes, std::move(backward));
}

}  // namespace triseg
