#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "triseg/tensor.hpp"

namespace triseg {

/// 3D boolean volume with physical voxel spacing in mm.
struct BinaryMask {
  std::array<int64_t, 3> extents{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<uint8_t> voxels;  // 0/1, x-major then y then z (z fastest)

  BinaryMask() = default;
  BinaryMask(std::array<int64_t, 3> ext, std::array<double, 3> sp = {1.0, 1.0, 1.0})
      : extents(ext), spacing(sp), voxels(ext[0] * ext[1] * ext[2], 0) {
    for (double s : sp)
      if (s <= 0) throw std::invalid_argument("mask: spacing must be positive");
  }

  int64_t numel() const { return extents[0] * extents[1] * extents[2]; }
  uint8_t& at(int64_t x, int64_t y, int64_t z) {
    return voxels[(x * extents[1] + y) * extents[2] + z];
  }
  uint8_t at(int64_t x, int64_t y, int64_t z) const {
    return voxels[(x * extents[1] + y) * extents[2] + z];
  }
  int64_t count() const {
    int64_t n = 0;
    for (uint8_t v : voxels) n += v != 0;
    return n;
  }
  bool empty() const { return count() == 0; }
};

inline void require_same_shape(const BinaryMask& a, const BinaryMask& b) {
  if (a.extents != b.extents)
    throw std::invalid_argument("masks have mismatched extents");
}

/// Overlap score 2|A∩B|/(|A|+|B|); both masks empty counts as perfect
/// agreement.
inline double dice_score(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b);
  int64_t na = 0, nb = 0, ni = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const bool va = a.voxels[i] != 0, vb = b.voxels[i] != 0;
    na += va;
    nb += vb;
    ni += va && vb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

namespace detail {

// Boundary voxels: foreground with a background 6-neighbor, where outside
// the volume counts as background.
inline std::vector<uint8_t> boundary_mask(const BinaryMask& m) {
  const int64_t X = m.extents[0], Y = m.extents[1], Z = m.extents[2];
  std::vector<uint8_t> out(m.numel(), 0);
  for (int64_t x = 0; x < X; ++x)
    for (int64_t y = 0; y < Y; ++y)
      for (int64_t z = 0; z < Z; ++z) {
        if (!m.at(x, y, z)) continue;
        const bool interior = x > 0 && x + 1 < X && y > 0 && y + 1 < Y && z > 0 && z + 1 < Z &&
                              m.at(x - 1, y, z) && m.at(x + 1, y, z) && m.at(x, y - 1, z) &&
                              m.at(x, y + 1, z) && m.at(x, y, z - 1) && m.at(x, y, z + 1);
        out[(x * Y + y) * Z + z] = interior ? 0 : 1;
      }
  return out;
}

// 1D lower envelope of parabolas (exact squared distance transform along
// one axis), at sample positions i*spacing. f holds squared distances in
// mm^2 and is overwritten.
inline void edt_1d(double* f, int64_t n, int64_t stride, double spacing, double* scratch_z,
                   int64_t* scratch_v, double* scratch_f) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int64_t k = 0;
  scratch_v[0] = 0;
  scratch_z[0] = -kInf;
  scratch_z[1] = kInf;
  scratch_f[0] = f[0];
  auto pos = [spacing](int64_t i) { return static_cast<double>(i) * spacing; };
  for (int64_t q = 1; q < n; ++q) {
    const double fq = f[q * stride];
    scratch_f[q] = fq;
    if (fq == kInf) continue;
    double s = 0;
    while (true) {
      const int64_t v = scratch_v[k];
      if (scratch_f[v] == kInf) {
        // the only parabola so far is unreachable; replace it
        --k;
        if (k < 0) break;
        continue;
      }
      s = (fq + pos(q) * pos(q) - scratch_f[v] - pos(v) * pos(v)) / (2 * pos(q) - 2 * pos(v));
      if (s > scratch_z[k]) break;
      --k;
      if (k < 0) break;
    }
    ++k;
    scratch_v[k] = q;
    scratch_z[k] = k == 0 ? -kInf : s;
    scratch_z[k + 1] = kInf;
  }
  if (scratch_f[scratch_v[0]] == kInf) return;  // entire line unreachable
  int64_t j = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (scratch_z[j + 1] < pos(q)) ++j;
    const int64_t v = scratch_v[j];
    const double d = pos(q) - pos(v);
    f[q * stride] = d * d + scratch_f[v];
  }
}

// Exact squared Euclidean distance in mm^2 from every voxel to the nearest
// seed voxel, via three sequential 1D transforms.
inline std::vector<double> edt_sq(const std::vector<uint8_t>& seeds,
                                  std::array<int64_t, 3> extents,
                                  std::array<double, 3> spacing) {
  const int64_t X = extents[0], Y = extents[1], Z = extents[2];
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> d(X * Y * Z);
  for (int64_t i = 0; i < X * Y * Z; ++i) d[i] = seeds[i] ? 0.0 : kInf;

  const int64_t nmax = std::max({X, Y, Z});
  std::vector<double> z(nmax + 1), fbuf(nmax);
  std::vector<int64_t> v(nmax);

  // along z (contiguous), then y, then x
  for (int64_t x = 0; x < X; ++x)
    for (int64_t y = 0; y < Y; ++y)
      edt_1d(d.data() + (x * Y + y) * Z, Z, 1, spacing[2], z.data(), v.data(), fbuf.data());
  for (int64_t x = 0; x < X; ++x)
    for (int64_t zz = 0; zz < Z; ++zz)
      edt_1d(d.data() + x * Y * Z + zz, Y, Z, spacing[1], z.data(), v.data(), fbuf.data());
  for (int64_t y = 0; y < Y; ++y)
    for (int64_t zz = 0; zz < Z; ++zz)
      edt_1d(d.data() + y * Z + zz, X, Y * Z, spacing[0], z.data(), v.data(), fbuf.data());
  return d;
}

}  // namespace detail

/// Symmetric Hausdorff distance (mm) between the boundary-voxel center
/// sets of two masks, exact via distance transforms. Both masks empty → 0;
/// exactly one empty → nullopt (undefined, the caller decides how to
/// report it).
inline std::optional<double> hausdorff(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b);
  if (a.spacing != b.spacing)
    throw std::invalid_argument("masks have mismatched spacing");
  auto ba = detail::boundary_mask(a);
  auto bb = detail::boundary_mask(b);
  const bool ea = std::find(ba.begin(), ba.end(), 1) == ba.end();
  const bool eb = std::find(bb.begin(), bb.end(), 1) == bb.end();
  if (ea && eb) return 0.0;
  if (ea || eb) return std::nullopt;

  const auto da = detail::edt_sq(ba, a.extents, a.spacing);  // distance to A's boundary
  const auto db = detail::edt_sq(bb, a.extents, a.spacing);
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (ba[i]) worst = std::max(worst, db[i]);  // directed A→B
    if (bb[i]) worst = std::max(worst, da[i]);  // directed B→A
  }
  return std::sqrt(worst);
}

/// Soft Dice loss over the foreground channel, summed jointly over the
/// batch: 1 − (2Σpg + ε)/(Σp + Σg + ε). prob must be a softmax output
/// [B,2,X,Y,Z]; target is a 0/1 volume [B,X,Y,Z].
constexpr double kDiceEps = 1e-5;

template <class T>
Tensor<T> dice_loss(const Tensor<T>& prob, const Tensor<T>& target) {
  const Shape& ps = prob.shape();
  if (ps.size() != 5 || ps[1] != 2)
    throw std::invalid_argument("dice_loss: prob must be [B,2,X,Y,Z], got " + shape_str(ps));
  const Shape ts{ps[0], ps[2], ps[3], ps[4]};
  if (target.shape() != ts)
    throw std::invalid_argument("dice_loss: target shape " + shape_str(target.shape()) +
                                " does not match prob " + shape_str(ps));
  const int64_t B = ps[0];
  const int64_t inner = ps[2] * ps[3] * ps[4];
  const T* pv = prob.values().data();
  const T* gv = target.values().data();

  // reject inputs that are not a probability simplex over the channels
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < inner; ++i) {
      const T s = pv[(b * 2 + 0) * inner + i] + pv[(b * 2 + 1) * inner + i];
      if (std::fabs(static_cast<double>(s) - 1.0) > 1e-3)
        throw std::invalid_argument("dice_loss: channel sums deviate from 1 (not a softmax output)");
    }

  double sum_pg = 0, sum_p = 0, sum_g = 0;
  for (int64_t b = 0; b < B; ++b) {
    const T* p = pv + (b * 2 + 1) * inner;  // foreground channel
    const T* g = gv + b * inner;
    for (int64_t i = 0; i < inner; ++i) {
      sum_pg += static_cast<double>(p[i]) * g[i];
      sum_p += p[i];
      sum_g += g[i];
    }
  }
  const double num = 2.0 * sum_pg + kDiceEps;
  const double den = sum_p + sum_g + kDiceEps;
  const T loss = static_cast<T>(1.0 - num / den);

  auto pn = prob.node();
  auto gn = target.node();
  auto backward = [pn, gn, B, inner, num, den](detail::Node<T>& node) {
    if (!pn->requires_grad) return;
    pn->ensure_grad();
    const T g0 = node.grad[0];
    // d(num/den)/dp_i = (2 g_i den − num) / den²; loss negates it
    const double inv_den = 1.0 / den;
    const double num_dd = num * inv_den * inv_den;
    for (int64_t b = 0; b < B; ++b) {
      T* gp = pn->grad.data() + (b * 2 + 1) * inner;
      const T* g = gn->value.data() + b * inner;
      for (int64_t i = 0; i < inner; ++i)
        gp[i] -= g0 * static_cast<T>(2.0 * g[i] * inv_den - num_dd);
    }
  };
  return Tensor<T>::result({1}, {loss}, {pn, gn}, std::move(backward));
}

/// Distribution summary of per-case scores. Quantiles interpolate linearly
/// between order statistics; the standard deviation is the population form.
struct ScoreSummary {
  double mean = 0, stddev = 0, median = 0, q25 = 0, q75 = 0;
  int64_t count = 0;
  int64_t undefined_count = 0;  // entries excluded before summarizing
};

inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double h = p * static_cast<double>(sorted.size() - 1);
  const int64_t lo = static_cast<int64_t>(std::floor(h));
  const int64_t hi = std::min<int64_t>(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - lo) * (sorted[hi] - sorted[lo]);
}

inline ScoreSummary summarize(std::vector<double> scores, int64_t undefined_count = 0) {
  if (scores.empty()) throw std::invalid_argument("summarize: empty score list");
  ScoreSummary s;
  s.count = static_cast<int64_t>(scores.size());
  s.undefined_count = undefined_count;
  double acc = 0;
  for (double v : scores) acc += v;
  s.mean = acc / static_cast<double>(scores.size());
  double sq = 0;
  for (double v : scores) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(scores.size()));
  std::sort(scores.begin(), scores.end());
  s.q25 = quantile_sorted(scores, 0.25);
  s.median = quantile_sorted(scores, 0.50);
  s.q75 = quantile_sorted(scores, 0.75);
  return s;
}

}  // namespace triseg
